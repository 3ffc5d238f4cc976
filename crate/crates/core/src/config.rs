//! Flat TOML experiment configuration.
//!
//! Every key is optional except `config_version`; missing keys take the
//! defaults below. `target_bpp` must match the rate implied by the latent
//! shape and image size.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::data::{DatasetSpec, SplitFractions};
use crate::error::{Result, SaicError};
use crate::evaluation::EvalOptions;
use crate::gsw::{default_tau_for_bpp, ClassAveraging, GswConfig};
use crate::losses::LossKind;
use crate::nn::AdamConfig;
use crate::si::SiConfig;
use crate::task::{write_atomic, ScoreSpace};
use crate::trainer::{TaskTrainConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "SAIC_DATA_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub dataset_name: String,
    /// Seed of the dataset shuffle, kept apart from the training seed so
    /// runs with different seeds share one split.
    pub data_seed: u64,
    pub data_root: Option<PathBuf>,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub calibration_count: usize,
    pub strict_images: bool,

    /// Defaults to `task.json` in the output directory.
    pub task_checkpoint: Option<PathBuf>,
    pub task_arch: String,
    pub split_layer: Option<String>,
    pub task_steps: u64,
    pub task_lr: f32,

    pub latent_channels: usize,
    pub codec_width: usize,
    pub target_bpp: f64,

    pub loss: LossKind,
    pub tau: Option<f64>,
    pub r: Option<f64>,
    pub score_space: ScoreSpace,
    pub class_averaging: ClassAveraging,

    pub batch_size: usize,
    pub pretrain_steps: u64,
    pub pretrain_lr: f32,
    pub finetune_steps: u64,
    pub finetune_lr: f32,

    pub eval_batch_size: usize,
    pub si_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset_name: "synthetic".into(),
            data_seed: 0,
            data_root: None,
            image_height: 96,
            image_width: 96,
            channels: 3,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            calibration_count: 256,
            strict_images: false,
            task_checkpoint: None,
            task_arch: "small-resnet".into(),
            split_layer: None,
            task_steps: 3000,
            task_lr: 1e-3,
            latent_channels: 8,
            codec_width: 32,
            target_bpp: 0.125,
            loss: LossKind::Saic,
            tau: None,
            r: None,
            score_space: ScoreSpace::Logits,
            class_averaging: ClassAveraging::AllClasses,
            batch_size: 32,
            pretrain_steps: 20_000,
            pretrain_lr: 1e-3,
            finetune_steps: 2_000,
            finetune_lr: 1e-4,
            eval_batch_size: 64,
            si_epochs: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| SaicError::Config(format!("config is not valid TOML: {e}")))?;
        match table.get("config_version").and_then(|v| v.as_integer()) {
            Some(v) if v == CONFIG_VERSION as i64 => {}
            Some(v) => {
                return Err(SaicError::Config(format!(
                    "config_version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            None => {
                return Err(SaicError::Config(
                    "config is missing the integer key config_version".into(),
                ))
            }
        }
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| SaicError::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SaicError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            SaicError::Config(m) => SaicError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec_unchecked().validate()?;
        self.codec_config().validate().map_err(|e| SaicError::Config(e.to_string()))?;
        let bpp = self.codec_config().bpp();
        if (bpp.as_f64() - self.target_bpp).abs() > 1e-12 * self.target_bpp.abs().max(1.0) {
            return Err(SaicError::Config(format!(
                "target_bpp {} does not match the {} bpp implied by latent_channels {} on {}x{} images; \
                 set latent_channels to {}",
                self.target_bpp,
                bpp,
                self.latent_channels,
                self.image_height,
                self.image_width,
                self.target_bpp * 64.0
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(SaicError::Config("batch sizes must be positive".into()));
        }
        if let Some(t) = self.tau {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(SaicError::Config(format!("tau must be finite and ≥ 0, got {t}")));
            }
        }
        if let Some(r) = self.r {
            if !(r > 0.0) {
                return Err(SaicError::Config(format!("r must be positive, got {r}")));
            }
        }
        self.pretrain_config().validate()?;
        if self.loss != LossKind::Tdic {
            self.finetune_config(self.loss).validate()?;
        }
        Ok(())
    }

    pub fn task_checkpoint_path(&self) -> PathBuf {
        self.task_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("task.json"))
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(r) = &self.data_root {
            return Ok(r.clone());
        }
        std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or_else(|| {
            SaicError::Config(format!(
                "no dataset root: set data_root in the config or the {DATA_ROOT_ENV} environment variable"
            ))
        })
    }

    fn dataset_spec_unchecked(&self) -> DatasetSpec {
        DatasetSpec {
            name: self.dataset_name.clone(),
            root: self.data_root.clone().unwrap_or_default(),
            split: SplitFractions {
                train: self.train_fraction,
                val: self.val_fraction,
                test: self.test_fraction,
            },
            seed: self.data_seed,
            image_size: (self.image_height, self.image_width),
            channels: self.channels,
            calibration_count: self.calibration_count,
            strict: self.strict_images,
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            root: self.data_root()?,
            ..self.dataset_spec_unchecked()
        })
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            image_size: (self.image_height, self.image_width),
            image_channels: self.channels,
            latent_channels: self.latent_channels,
            width: self.codec_width,
        }
    }

    pub fn gsw_config(&self) -> GswConfig {
        GswConfig {
            tau: self
                .tau
                .unwrap_or_else(|| default_tau_for_bpp(self.codec_config().bpp().as_f64())),
            r: self.r,
            space: self.score_space,
            averaging: self.class_averaging,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                lr: self.pretrain_lr,
                ..Default::default()
            },
            seed: self.seed,
            ..TrainConfig::pretrain(self.pretrain_steps)
        }
    }

    pub fn finetune_config(&self, loss: LossKind) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                lr: self.finetune_lr,
                ..Default::default()
            },
            seed: self.seed,
            ..TrainConfig::finetune(loss, self.finetune_steps)
        }
    }

    pub fn task_train_config(&self) -> TaskTrainConfig {
        TaskTrainConfig {
            arch: self.task_arch.clone(),
            steps: self.task_steps,
            batch_size: self.batch_size,
            lr: self.task_lr,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self, with_si: bool) -> EvalOptions {
        EvalOptions {
            batch_size: self.eval_batch_size,
            si: with_si.then(|| SiConfig {
                epochs: self.si_epochs,
                seed: self.seed,
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| SaicError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }
}
