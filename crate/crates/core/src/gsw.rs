//! Gradient-based semantic weights.
//!
//! For every feature channel `k` and class `c`, the gradient of the class
//! score with respect to the feature map is averaged over the map's spatial
//! positions (and over images), then averaged over classes. The resulting
//! raw vector `W` is mapped to loss weights `W' = r · softmax(τ · W)`.
//!
//! Gradients are signed; nothing is rectified.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{contract, Result, SaicError};
use crate::task::{ScoreSpace, TaskNetwork};
use crate::tensor::Tensor;

pub const WEIGHTS_VERSION: u32 = 1;

/// How per-class weights are combined into one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassAveraging {
    /// Mean over all `C` classes for every image.
    #[default]
    AllClasses,
    /// Only the ground-truth class of each image.
    GroundTruth,
}

impl std::str::FromStr for ClassAveraging {
    type Err = SaicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-classes" | "all" => Ok(ClassAveraging::AllClasses),
            "ground-truth" | "gt" => Ok(ClassAveraging::GroundTruth),
            other => Err(SaicError::Config(format!("unknown class averaging '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GswConfig {
    pub tau: f64,
    /// Scale of the mapped weights; `None` means `K`.
    pub r: Option<f64>,
    pub space: ScoreSpace,
    pub averaging: ClassAveraging,
}

impl Default for GswConfig {
    fn default() -> Self {
        GswConfig {
            tau: 400.0,
            r: None,
            space: ScoreSpace::Logits,
            averaging: ClassAveraging::AllClasses,
        }
    }
}

/// Temperature defaults per operating point.
pub fn default_tau_for_bpp(bpp: f64) -> f64 {
    if bpp <= 0.125 + 1e-12 {
        400.0
    } else if bpp <= 0.25 + 1e-12 {
        3100.0
    } else {
        2900.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInfo {
    pub images: usize,
    pub seed: u64,
    pub averaging: ClassAveraging,
    pub space: ScoreSpace,
    pub task_checksum: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticWeights {
    pub format_version: u32,
    pub k: usize,
    pub tau: f64,
    pub r: f64,
    /// `W`
    pub raw: Vec<f64>,
    /// `W'`
    pub mapped: Vec<f64>,
    pub calibration: Option<CalibrationInfo>,
}

impl SemanticWeights {
    pub fn from_raw(raw: Vec<f64>, tau: f64, r: f64) -> Result<Self> {
        let mapped = map_weights(&raw, tau, r)?;
        Ok(SemanticWeights {
            format_version: WEIGHTS_VERSION,
            k: raw.len(),
            tau,
            r,
            raw,
            mapped,
            calibration: None,
        })
    }

    /// All mapped weights equal to one (`r = K`, `τ = 0`).
    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_raw(vec![0.0; k], 0.0, k as f64)
    }

    /// Same raw weights mapped with a different temperature/scale.
    pub fn remap(&self, tau: f64, r: f64) -> Result<Self> {
        let mut w = Self::from_raw(self.raw.clone(), tau, r)?;
        w.calibration = self.calibration.clone();
        Ok(w)
    }

    pub fn mapped_f32(&self) -> Vec<f32> {
        self.mapped.iter().map(|&v| v as f32).collect()
    }

    /// Channels sorted by descending mapped weight.
    pub fn top_k(&self, n: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<(usize, f64)> = self.mapped.iter().copied().enumerate().collect();
        idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        idx.truncate(n);
        idx
    }

    pub fn mapped_variance(&self) -> f64 {
        variance(&self.mapped)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| SaicError::Format(format!("serializing weights: {e}")))?;
        crate::task::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SaicError::io(path, e))?;
        let w: SemanticWeights = serde_json::from_slice(&bytes).map_err(|e| {
            SaicError::Format(format!("{} is not a weights file: {e}", path.display()))
        })?;
        if w.format_version != WEIGHTS_VERSION {
            return Err(SaicError::Format(format!(
                "weights file version {} is not supported",
                w.format_version
            )));
        }
        if w.raw.len() != w.k || w.mapped.len() != w.k {
            return Err(SaicError::Format("weights file has inconsistent lengths".into()));
        }
        Ok(w)
    }
}

pub fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Spatial mean of `∂y^c/∂f_k` per image: `[B][K]`.
fn spatial_mean_gradients(
    net: &TaskNetwork,
    features: &Tensor,
    class: usize,
    space: ScoreSpace,
) -> Result<Vec<Vec<f64>>> {
    let g = net.score_gradient(features, class, space)?;
    let (b, k, m, n) = g.dims4()?;
    let mn = (m * n) as f64;
    Ok((0..b)
        .map(|i| {
            g.item(i)
                .chunks(m * n)
                .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() / mn)
                .collect::<Vec<f64>>()
        })
        .inspect(|row| debug_assert_eq!(row.len(), k))
        .collect())
}

/// `w_k^c`: spatially averaged gradient of class `c`'s score with respect to
/// channel `k`, averaged over the images of `x`.
pub fn class_channel_weight(
    net: &TaskNetwork,
    x: &Tensor,
    class: usize,
    space: ScoreSpace,
) -> Result<Vec<f64>> {
    contract!(
        class < net.num_classes(),
        "class {class} out of range for {} classes",
        net.num_classes()
    );
    let features = net.feature_maps(x)?;
    let rows = spatial_mean_gradients(net, &features, class, space)?;
    let b = rows.len() as f64;
    let k = net.feature_shape().0;
    let mut out = vec![0.0; k];
    for row in &rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|v| v / b).collect())
}

/// `w_k = (1/C) Σ_c w_k^c` from a `[C][K]` table.
pub fn average_over_classes(per_class: &[Vec<f64>]) -> Result<Vec<f64>> {
    contract!(!per_class.is_empty(), "need at least one class row");
    let k = per_class[0].len();
    contract!(
        per_class.iter().all(|r| r.len() == k),
        "class rows have different lengths"
    );
    let c = per_class.len() as f64;
    Ok((0..k)
        .map(|j| per_class.iter().map(|r| r[j]).sum::<f64>() / c)
        .collect())
}

/// `W' = r · softmax(τ · W)` with max subtraction.
pub fn map_weights(raw: &[f64], tau: f64, r: f64) -> Result<Vec<f64>> {
    contract!(!raw.is_empty(), "semantic weights need at least one channel");
    contract!(tau >= 0.0 && tau.is_finite(), "tau must be finite and >= 0, got {tau}");
    contract!(r > 0.0 && r.is_finite(), "r must be finite and > 0, got {r}");
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(SaicError::Contract(format!(
            "raw weight {i} is not finite ({})",
            raw[i]
        )));
    }
    let scaled: Vec<f64> = raw.iter().map(|&w| tau * w).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| r * e / sum).collect())
}

/// Raw weights accumulated over all calibration images, then mapped.
pub fn compute_semantic_weights(
    net: &TaskNetwork,
    calibration: &[ImageBatch],
    cfg: &GswConfig,
    seed: u64,
) -> Result<SemanticWeights> {
    let images: usize = calibration.iter().map(ImageBatch::len).sum();
    if images == 0 {
        return Err(SaicError::Config(
            "semantic weights need at least one calibration image".into(),
        ));
    }
    let k = net.feature_shape().0;
    let classes = net.num_classes();
    let mut sum = vec![0.0f64; k];
    for batch in calibration {
        let features = net.feature_maps(&batch.pixels)?;
        for c in 0..classes {
            let rows = spatial_mean_gradients(net, &features, c, cfg.space)?;
            for (b, row) in rows.iter().enumerate() {
                let weight = match cfg.averaging {
                    ClassAveraging::AllClasses => 1.0 / classes as f64,
                    ClassAveraging::GroundTruth if batch.labels[b] == c => 1.0,
                    ClassAveraging::GroundTruth => continue,
                };
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += weight * v;
                }
            }
        }
    }
    let raw: Vec<f64> = sum.into_iter().map(|v| v / images as f64).collect();
    let r = cfg.r.unwrap_or(k as f64);
    let mut w = SemanticWeights::from_raw(raw, cfg.tau, r)?;
    w.calibration = Some(CalibrationInfo {
        images,
        seed,
        averaging: cfg.averaging,
        space: cfg.space,
        task_checksum: net.checksum(),
    });
    Ok(w)
}
