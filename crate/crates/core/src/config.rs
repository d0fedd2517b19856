//! Flat `key = value` configuration files. Keys mirror the config struct
//! fields; unknown keys are errors, `#` starts a comment line.

use crate::error::{Result, SacError};
use crate::model::SacNetConfig;
use crate::optim::AdamWConfig;
use crate::tensor::NumericMode;
use std::path::{Path, PathBuf};

/// Run-level configuration for the training harness.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: SacNetConfig,
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    pub kappa_max: f64,
    pub gamma: f64,
    pub numeric_mode: NumericMode,
    pub train_fraction: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: SacNetConfig::toy(4),
            batch_size: 8,
            base_lr: 3e-4,
            epochs: 60,
            seed: 42,
            adamw: AdamWConfig::default(),
            kappa_max: 32.0,
            gamma: 0.6,
            numeric_mode: NumericMode::F64,
            train_fraction: 0.8,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(SacError::Config("batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(SacError::Config("base_lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(SacError::Config("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SacError::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.kappa_max < 0.0 {
            return Err(SacError::Config("kappa_max must be non-negative".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(SacError::Config(format!(
                "train_fraction {} outside (0,1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in flat_pairs(text)? {
            if apply_model_key(&mut cfg.model, &key, &value)? {
                continue;
            }
            match key.as_str() {
                "batch_size" => cfg.batch_size = parse_num(&key, &value)?,
                "base_lr" => cfg.base_lr = parse_num(&key, &value)?,
                "epochs" => cfg.epochs = parse_num(&key, &value)?,
                "seed" => cfg.seed = parse_num(&key, &value)?,
                "weight_decay" => cfg.adamw.weight_decay = parse_num(&key, &value)?,
                "beta1" => cfg.adamw.beta1 = parse_num(&key, &value)?,
                "beta2" => cfg.adamw.beta2 = parse_num(&key, &value)?,
                "adam_eps" => cfg.adamw.eps = parse_num(&key, &value)?,
                "kappa_max" => cfg.kappa_max = parse_num(&key, &value)?,
                "gamma" => cfg.gamma = parse_num(&key, &value)?,
                "train_fraction" => cfg.train_fraction = parse_num(&key, &value)?,
                "numeric_mode" => {
                    cfg.numeric_mode = match value.as_str() {
                        "f32" => NumericMode::F32,
                        "f64" => NumericMode::F64,
                        other => {
                            return Err(SacError::Config(format!(
                                "numeric_mode must be f32 or f64, got {other}"
                            )))
                        }
                    }
                }
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(SacError::Config(format!("unknown config key: {other}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SacError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }
}

/// Parses a model config from flat text where every key must be a model key.
pub fn parse_model_config(text: &str) -> Result<SacNetConfig> {
    let mut cfg = SacNetConfig::toy(4);
    for (key, value) in flat_pairs(text)? {
        if !apply_model_key(&mut cfg, &key, &value)? {
            return Err(SacError::Config(format!("unknown model config key: {key}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn flat_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(SacError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SacError::Config(format!("bad value for {key}: {value}")))
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| SacError::Config(format!("bad list value for {key}: {value}")))
        })
        .collect()
}

/// Applies one key to the model config; returns false if the key is not a
/// model key.
pub fn apply_model_key(cfg: &mut SacNetConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "in_channels" => cfg.in_channels = parse_num(key, value)?,
        "num_classes" => cfg.num_classes = parse_num(key, value)?,
        "embed_dims" => cfg.embed_dims = parse_usize_list(key, value)?,
        "depths" => cfg.depths = parse_usize_list(key, value)?,
        "groups" => cfg.groups = parse_num(key, value)?,
        "ffn_ratio" => cfg.ffn_ratio = parse_num(key, value)?,
        "droppath_max" => cfg.droppath_max = parse_num(key, value)?,
        "share_projection" => {
            cfg.share_projection = match value {
                "true" => true,
                "false" => false,
                other => {
                    return Err(SacError::Config(format!(
                        "share_projection must be true or false, got {other}"
                    )))
                }
            }
        }
        "input_size" => {
            let parts = parse_usize_list(key, value)?;
            match parts.as_slice() {
                [s] => {
                    cfg.input_h = *s;
                    cfg.input_w = *s;
                }
                [h, w] => {
                    cfg.input_h = *h;
                    cfg.input_w = *w;
                }
                _ => {
                    return Err(SacError::Config(format!(
                        "input_size expects `S` or `H,W`, got {value}"
                    )))
                }
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "\
# toy run
embed_dims = 16,32,64,128
depths = 1,1,2,1
groups = 2
num_classes = 4
input_size = 32
batch_size = 8
base_lr = 3e-4
epochs = 60
seed = 42
kappa_max = 32
gamma = 0.6
numeric_mode = f64
data_dir = /tmp/data
out_dir = /tmp/out
";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.model.embed_dims, vec![16, 32, 64, 128]);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.numeric_mode, NumericMode::F64);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/data"));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(TrainConfig::parse("epochs 60\n").is_err());
        assert!(TrainConfig::parse("epochs = sixty\n").is_err());
    }

    #[test]
    fn model_roundtrips_through_canonical_string() {
        let cfg = SacNetConfig::toy(4);
        let parsed = parse_model_config(&cfg.canonical_string()).unwrap();
        assert_eq!(parsed, cfg);
        let paper = SacNetConfig::paper(9);
        assert_eq!(parse_model_config(&paper.canonical_string()).unwrap(), paper);
    }

    #[test]
    fn invalid_values_rejected_by_validate() {
        assert!(TrainConfig::parse("batch_size = 0\n").is_err());
        assert!(TrainConfig::parse("gamma = 1.5\n").is_err());
        assert!(TrainConfig::parse("numeric_mode = f16\n").is_err());
    }
}
