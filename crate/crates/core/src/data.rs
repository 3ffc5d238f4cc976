//! Dataset ingestion: directory-per-class image folders, deterministic
//! shuffling and splitting, and the calibration subset used for semantic
//! weights.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, SaicError};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Normalized pixels `[B, C, H, W]` in `[0, 1]` with labels and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        let (b, c, h, w) = pixels.dims4()?;
        contract!(b >= 1, "image batch must hold at least one image");
        contract!(c == 1 || c == 3, "channels must be 1 or 3, got {c}");
        contract!(h >= 8 && w >= 8, "images must be at least 8x8, got {h}x{w}");
        contract!(
            labels.len() == b && ids.len() == b,
            "batch of {b} images has {} labels and {} ids",
            labels.len(),
            ids.len()
        );
        contract!(
            pixels.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "pixel values must lie in [0, 1]"
        );
        Ok(ImageBatch {
            pixels,
            labels,
            ids,
        })
    }

    /// Wraps pixels that carry no labels (label 0, positional ids).
    pub fn unlabeled(pixels: Tensor) -> Result<Self> {
        let b = pixels.batch();
        let ids = (0..b).map(|i| format!("#{i}")).collect();
        ImageBatch::new(pixels, vec![0; b], ids)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub root: PathBuf,
    pub split: SplitFractions,
    pub seed: u64,
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub channels: usize,
    pub calibration_count: usize,
    /// Fail on unreadable images instead of skipping them.
    pub strict: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "dataset".into(),
            root: PathBuf::from("data"),
            split: SplitFractions::default(),
            seed: 0,
            image_size: (96, 96),
            channels: 3,
            calibration_count: 256,
            strict: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(SaicError::Config(format!(
                "split fractions must lie in [0, 1], got {s:?}"
            )));
        }
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(SaicError::Config(format!(
                "split fractions must sum to 1, got {}",
                s.train + s.val + s.test
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(SaicError::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(SaicError::Config(format!(
                "image size must be at least 8x8, got {:?}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn shuffle_seed(&self) -> u64 {
        let name_hash = crc32fast::hash(self.name.as_bytes()) as u64;
        self.seed ^ (name_hash << 32 | name_hash)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub pixels: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A loaded, shuffled and split dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

impl Dataset {
    /// Shuffles `samples` with the spec's seed and splits them. The input
    /// order must itself be deterministic (e.g. sorted by id).
    pub fn from_samples(
        spec: DatasetSpec,
        class_names: Vec<String>,
        mut samples: Vec<Sample>,
    ) -> Result<Self> {
        spec.validate()?;
        let item = spec.channels * spec.image_size.0 * spec.image_size.1;
        for s in &samples {
            contract!(
                s.pixels.len() == item,
                "sample {} has {} values, expected {item}",
                s.id,
                s.pixels.len()
            );
            contract!(
                s.label < class_names.len(),
                "sample {} has label {} outside {} classes",
                s.id,
                s.label,
                class_names.len()
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed());
        samples.shuffle(&mut rng);
        let n = samples.len();
        let n_train = ((n as f64) * spec.split.train).round() as usize;
        let n_val = (((n as f64) * spec.split.val).round() as usize).min(n - n_train);
        let test = samples.split_off(n_train + n_val);
        let val = samples.split_off(n_train);
        info!(
            "dataset '{}': {} train / {} val / {} test samples, {} classes",
            spec.name,
            samples.len(),
            val.len(),
            test.len(),
            class_names.len()
        );
        Ok(Dataset {
            spec,
            class_names,
            train: samples,
            val,
            test,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        self.samples(split).len()
    }

    fn item_shape(&self) -> [usize; 3] {
        [
            self.spec.channels,
            self.spec.image_size.0,
            self.spec.image_size.1,
        ]
    }

    /// Batch of the given sample indices of `split`, in that order.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Result<ImageBatch> {
        let samples = self.samples(split);
        let [c, h, w] = self.item_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            contract!(i < samples.len(), "sample index {i} out of range");
            data.extend_from_slice(&samples[i].pixels);
            labels.push(samples[i].label);
            ids.push(samples[i].id.clone());
        }
        ImageBatch::new(Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels, ids)
    }

    /// Consecutive batches covering `split` in its stored order.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
    ) -> impl Iterator<Item = Result<ImageBatch>> + '_ {
        let n = self.len(split);
        let bs = batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |k| {
            let idx: Vec<usize> = (k * bs..((k + 1) * bs).min(n)).collect();
            self.batch(split, &idx)
        })
    }

    /// The first `calibration_count` training samples, batched.
    pub fn calibration_batches(&self, batch_size: usize) -> Result<Vec<ImageBatch>> {
        let count = self.spec.calibration_count;
        if count == 0 {
            return Err(SaicError::Config(
                "calibration_count must be at least 1".into(),
            ));
        }
        if count > self.train.len() {
            return Err(SaicError::Config(format!(
                "calibration_count {count} exceeds the {} training samples",
                self.train.len()
            )));
        }
        if count == 1 {
            warn!("semantic weights will be computed from a single calibration image");
        }
        let bs = batch_size.max(1);
        (0..count.div_ceil(bs))
            .map(|k| {
                let idx: Vec<usize> = (k * bs..((k + 1) * bs).min(count)).collect();
                self.batch(Split::Train, &idx)
            })
            .collect()
    }
}

/// Loads a directory-per-class dataset: `root/<class>/<image>.{png,jpg,jpeg}`.
/// Classes are labelled in sorted directory-name order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if !spec.root.is_dir() {
        return Err(SaicError::Config(format!(
            "dataset root {} does not exist or is not a directory",
            spec.root.display()
        )));
    }
    let mut class_dirs: Vec<PathBuf> = read_dir_sorted(&spec.root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(SaicError::Config(format!(
            "dataset root {} has no class directories",
            spec.root.display()
        )));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir.file_name().unwrap().to_string_lossy().to_string();
        for path in read_dir_sorted(dir)? {
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            match load_image(&path, spec.image_size, spec.channels, true) {
                Ok(pixels) => samples.push(Sample {
                    id: format!("{class}/{}", path.file_name().unwrap().to_string_lossy()),
                    label,
                    pixels,
                }),
                Err(e) if !spec.strict => warn!("skipping {}: {e}", path.display()),
                Err(e) => return Err(e),
            }
        }
        class_names.push(class);
    }
    Dataset::from_samples(spec.clone(), class_names, samples)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SaicError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Reads one image as CHW floats in `[0, 1]`. With `resize`, the shorter
/// side is scaled to fit and the result center-cropped; without it a size
/// mismatch is a contract error.
pub fn load_image(
    path: &Path,
    size: (usize, usize),
    channels: usize,
    resize: bool,
) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|source| SaicError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (h, w) = size;
    let img = if img.height() as usize == h && img.width() as usize == w {
        img
    } else if resize {
        let scale = (w as f64 / img.width() as f64).max(h as f64 / img.height() as f64);
        let nw = ((img.width() as f64 * scale).round() as u32).max(w as u32);
        let nh = ((img.height() as f64 * scale).round() as u32).max(h as u32);
        let resized = img.resize_exact(nw, nh, FilterType::Triangle);
        resized.crop_imm((nw - w as u32) / 2, (nh - h as u32) / 2, w as u32, h as u32)
    } else {
        return Err(SaicError::Contract(format!(
            "{} is {}x{}, expected {}x{}",
            path.display(),
            img.height(),
            img.width(),
            h,
            w
        )));
    };
    Ok(image_to_chw(&img, channels))
}

fn image_to_chw(img: &DynamicImage, channels: usize) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; channels * h * w];
    if channels == 1 {
        let g = img.to_luma8();
        for (i, p) in g.pixels().enumerate() {
            out[i] = p.0[0] as f32 / 255.0;
        }
    } else {
        let rgb = img.to_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = p.0[c] as f32 / 255.0;
            }
        }
    }
    out
}

/// Writes CHW pixels in `[0, 1]` as an 8-bit PNG (or JPEG by extension).
pub fn save_image(path: &Path, pixels: &[f32], channels: usize, h: usize, w: usize) -> Result<()> {
    contract!(
        pixels.len() == channels * h * w,
        "pixel buffer does not match {channels}x{h}x{w}"
    );
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = if channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([q(pixels[y as usize * w + x as usize])])
        }))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([
                q(pixels[i]),
                q(pixels[h * w + i]),
                q(pixels[2 * h * w + i]),
            ])
        }))
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SaicError::io(parent, e))?;
    }
    img.save(path).map_err(|source| SaicError::Image {
        path: path.to_path_buf(),
        source,
    })
}
