use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use saic::config::ExperimentConfig;
use saic::data::{load_dataset, Dataset};
use saic::losses::LossKind;
use saic::task::TaskNetwork;
use saic::trainer::CodecCheckpoint;
use saic::{Result, SaicError};

use crate::Common;

pub const LOCK_FILE: &str = ".saic.lock";
pub const PRETRAIN: &str = "pretrain.json";
pub const WEIGHTS: &str = "weights.json";

/// Removes the lock file when dropped.
struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = std::fs::read_to_string(&path).unwrap_or_default();
                Err(SaicError::Config(format!(
                    "output directory {} is in use by process {} (remove {} if that run is gone)",
                    dir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(SaicError::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    _lock: Lock,
}

/// Config file (or defaults) with `--set` patches and flag overrides applied.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut table: toml::Table = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| SaicError::io(path, e))?;
            // Surfaces version and schema errors against the file itself.
            ExperimentConfig::load(path)?;
            text.parse()
                .map_err(|e| SaicError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default()
            .to_toml()
            .parse()
            .expect("default config parses"),
    };
    for item in &common.set {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            SaicError::Config(format!("--set expects KEY=VALUE, got '{item}'"))
        })?;
        let key = key.trim();
        table.insert(key.to_string(), parse_value(value.trim()));
    }
    let mut put = |k: &str, v: toml::Value| {
        table.insert(k.to_string(), v);
    };
    if let Some(d) = &common.output_dir {
        put("output_dir", toml::Value::String(d.display().to_string()));
    }
    if let Some(d) = &common.data_root {
        put("data_root", toml::Value::String(d.display().to_string()));
    }
    if let Some(s) = common.seed {
        put("seed", toml::Value::Integer(s as i64));
    }
    let cfg = ExperimentConfig::from_toml(&toml::to_string(&table).expect("table serializes"))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(v: &str) -> toml::Value {
    let doc = format!("v = {v}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

impl Context {
    pub fn open(common: &Common) -> Result<Context> {
        let cfg = resolve_config(common)?;
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| SaicError::io(&out, e))?;
        let lock = Lock::acquire(&out)?;
        let written = cfg.write_resolved(&out)?;
        debug!("resolved config written to {}", written.display());
        Ok(Context {
            cfg,
            out,
            _lock: lock,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        std::fs::create_dir_all(&d).map_err(|e| SaicError::io(&d, e))?;
        Ok(d)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let spec = self.cfg.dataset_spec()?;
        info!("loading dataset from {}", spec.root.display());
        let data = load_dataset(&spec)?;
        info!(
            "{} classes, {} train / {} val / {} test images",
            data.num_classes(),
            data.len(saic::data::Split::Train),
            data.len(saic::data::Split::Val),
            data.len(saic::data::Split::Test)
        );
        Ok(data)
    }

    pub fn task(&self) -> Result<TaskNetwork> {
        let path = self.cfg.task_checkpoint_path();
        if !path.exists() {
            return Err(SaicError::Config(format!(
                "no task network at {}; run `saic train-task` first",
                path.display()
            )));
        }
        TaskNetwork::load_checkpoint(&path, self.cfg.split_layer.as_deref())
    }

    pub fn pretrained(&self) -> Result<CodecCheckpoint> {
        let path = self.path(PRETRAIN);
        if !path.exists() {
            return Err(SaicError::Config(format!(
                "no pre-trained codec at {}; run `saic train-codec` first",
                path.display()
            )));
        }
        CodecCheckpoint::load(&path)
    }

    /// Checkpoint file written by `finetune` for a loss variant.
    pub fn finetune_name(loss: LossKind, uniform: bool) -> String {
        match (loss, uniform) {
            (LossKind::Saic, true) => "finetune_saic_uniform.json".into(),
            (l, _) => format!("finetune_{}.json", l.name().to_ascii_lowercase()),
        }
    }

    pub fn log_file(&self, stem: &str) -> Result<File> {
        let p = self.path(&format!("{stem}_log.tsv"));
        File::create(&p).map_err(|e| SaicError::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(set: &[&str]) -> Common {
        Common {
            config: None,
            output_dir: Some("out".into()),
            data_root: Some("d".into()),
            seed: Some(7),
            set: set.iter().map(|s| s.to_string()).collect(),
            verbose: 0,
        }
    }

    #[test]
    fn set_values_are_typed() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("apic"), toml::Value::String("apic".into()));
        assert_eq!(parse_value("\"x y\""), toml::Value::String("x y".into()));
    }

    #[test]
    fn flags_override_set_and_defaults() {
        let cfg = resolve_config(&common(&["loss=apic", "pretrain_steps=5", "seed=1"])).unwrap();
        assert_eq!(cfg.loss, LossKind::Apic);
        assert_eq!(cfg.pretrain_steps, 5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.data_root, Some(PathBuf::from("d")));
    }

    #[test]
    fn set_validates_the_result() {
        assert!(resolve_config(&common(&["latent_channels=32"])).is_err());
        assert!(resolve_config(&common(&["latent_channels=32", "target_bpp=0.5"])).is_ok());
        assert!(resolve_config(&common(&["nope"])).is_err());
    }
}
