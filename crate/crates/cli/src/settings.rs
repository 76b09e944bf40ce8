//! Run configuration: built-in defaults, then a `key = value` file, then
//! command-line overrides. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use segdec::config::{parse_value, KvFile};
use segdec::data::{ShapeFamily, SynthSpec};
use segdec::network::NetConfig;
use segdec::training::TrainConfig;
use segdec::{DType, Error, Result};

pub const RESOLVED_FILE: &str = "run_config.resolved";

/// Learning rate used when none is configured.
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub data: SynthSpec,
    pub data_dir: PathBuf,
    pub train: TrainConfig,
    pub dtype: DType,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            data: SynthSpec::default(),
            data_dir: PathBuf::from("data"),
            train: TrainConfig {
                lr: DEFAULT_LR,
                ..TrainConfig::default()
            },
            dtype: DType::F32,
            out: PathBuf::from("run"),
        }
    }
}

fn dtype_str(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

impl RunConfig {
    /// Defaults, overlaid by `file` when given, overlaid by `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in KvFile::parse(&text)?.iter() {
                cfg.apply(k, v)?;
            }
        }
        for (k, v) in overrides {
            cfg.apply(k, v)?;
        }
        cfg.net.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.net.apply(key, value)? {
            if key == "seed" {
                self.data.seed = self.net.seed;
                self.train.seed = self.net.seed;
            }
            return Ok(());
        }
        match key {
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.count" => self.data.count = parse_value(key, value)?,
            "data.size" => {
                let s: usize = parse_value(key, value)?;
                self.data.height = s;
                self.data.width = s;
            }
            "data.family" => self.data.family = ShapeFamily::parse(value)?,
            "data.blur" => self.data.blur = parse_value(key, value)?,
            "data.noise" => self.data.noise = parse_value(key, value)?,
            "train.epochs" => self.train.epochs = parse_value(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, value)?,
            "train.lr" => self.train.lr = parse_value(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_value(key, value)?,
            "train.val_count" => self.train.val_count = parse_value(key, value)?,
            "train.dtype" => {
                self.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("train.dtype must be f32 or f64, got `{value}`"))),
                }
            }
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = self.net.to_kv();
        kv.set("data.dir", self.data_dir.display().to_string());
        kv.set("data.count", self.data.count.to_string());
        kv.set("data.size", self.data.height.to_string());
        kv.set("data.family", self.data.family.as_str());
        kv.set("data.blur", self.data.blur.to_string());
        kv.set("data.noise", self.data.noise.to_string());
        kv.set("train.epochs", self.train.epochs.to_string());
        kv.set("train.batch_size", self.train.batch_size.to_string());
        kv.set("train.lr", self.train.lr.to_string());
        kv.set("train.weight_decay", self.train.weight_decay.to_string());
        kv.set("train.val_count", self.train.val_count.to_string());
        kv.set("train.dtype", dtype_str(self.dtype));
        kv.set("out", self.out.display().to_string());
        kv
    }

    /// Writes the effective configuration to `dir/run_config.resolved`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_FILE), self.to_kv().render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "# toy\ntrain.epochs = 3\ntffa.fourier = false\nseed = 4\n").unwrap();
        let cfg = RunConfig::resolve(Some(&file), &kv(&[("train.epochs", "5")])).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert!(!cfg.net.fourier);
        assert_eq!((cfg.net.seed, cfg.data.seed, cfg.train.seed), (4, 4, 4));
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for (k, v) in [("train.epoch", "3"), ("train.epochs", "three"), ("train.dtype", "f16")] {
            assert!(matches!(RunConfig::resolve(None, &kv(&[(k, v)])), Err(Error::Config(_))), "{k}");
        }
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::resolve(None, &kv(&[("model.use_smmm", "false"), ("data.size", "32")])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write_resolved(dir.path()).unwrap();
        let again = RunConfig::resolve(Some(&dir.path().join(RESOLVED_FILE)), &[]);
        assert_eq!(again.unwrap(), cfg);
    }
}
