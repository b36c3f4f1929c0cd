//! Experiment configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;

use crate::backbone::{BackboneConfig, Consumption, PosEncMode, Precision};
use crate::error::{Error, Result};
use crate::randgroup::GroupingMode;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DatasetSpec {
    Synthetic {
        seed: u64,
        n_train: usize,
        n_val: usize,
    },
    /// Directory holding the CIFAR-10 binary batches; `limit` caps the
    /// records read per file.
    Cifar10 { path: PathBuf, limit: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LrSchedule {
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the end of the cosine schedule.
    pub min_lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Seeds parameter init, the grouping plan, batch order and per-sample plans.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

pub const DEFAULT_DATA_SEED: u64 = 1000;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            dataset: DatasetSpec::Synthetic {
                seed: DEFAULT_DATA_SEED,
                n_train: 512,
                n_val: 512,
            },
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            output_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl ExperimentConfig {
    /// Recognized keys, in the order [`ExperimentConfig::to_kv`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "image_size",
        "patch_size",
        "channels",
        "d_model",
        "depth",
        "n_heads",
        "group_size",
        "mlp_ratio",
        "grouping",
        "posenc",
        "consumption",
        "n_classes",
        "precision",
        "dataset",
        "data_seed",
        "n_train",
        "n_val",
        "cifar_path",
        "cifar_limit",
        "epochs",
        "batch_size",
        "lr",
        "min_lr",
        "weight_decay",
        "lr_schedule",
        "seed",
        "output_dir",
    ];

    /// Defaults overridden by the lines of `text`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv_str(text)?;
        Ok(c)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.backbone;
        match key {
            "image_size" => b.image_size = parse_num(key, value)?,
            "patch_size" => b.patch_size = parse_num(key, value)?,
            "channels" => b.channels = parse_num(key, value)?,
            "d_model" => b.d_model = parse_num(key, value)?,
            "depth" => b.depth = parse_num(key, value)?,
            "n_heads" => b.n_heads = parse_num(key, value)?,
            "group_size" => b.group_size = parse_num(key, value)?,
            "mlp_ratio" => b.mlp_ratio = parse_num(key, value)?,
            "grouping" => b.grouping = GroupingMode::parse(value)?,
            "posenc" => b.posenc = PosEncMode::parse(value)?,
            "consumption" => b.consumption = Consumption::parse(value)?,
            "n_classes" => b.n_classes = parse_num(key, value)?,
            "precision" => b.precision = Precision::parse(value)?,
            "dataset" => {
                self.dataset = match (value, &self.dataset) {
                    ("synthetic", DatasetSpec::Synthetic { .. })
                    | ("cifar10", DatasetSpec::Cifar10 { .. }) => return Ok(()),
                    ("synthetic", _) => Self::default().dataset,
                    ("cifar10", _) => DatasetSpec::Cifar10 {
                        path: PathBuf::new(),
                        limit: None,
                    },
                    _ => return Err(Error::Config(format!("unknown dataset '{value}'"))),
                }
            }
            "data_seed" | "n_train" | "n_val" => match &mut self.dataset {
                DatasetSpec::Synthetic {
                    seed,
                    n_train,
                    n_val,
                } => match key {
                    "data_seed" => *seed = parse_num(key, value)?,
                    "n_train" => *n_train = parse_num(key, value)?,
                    _ => *n_val = parse_num(key, value)?,
                },
                DatasetSpec::Cifar10 { .. } => {
                    return Err(Error::Config(format!(
                        "{key} applies to the synthetic dataset only"
                    )))
                }
            },
            "cifar_path" | "cifar_limit" => match &mut self.dataset {
                DatasetSpec::Cifar10 { path, limit } => {
                    if key == "cifar_path" {
                        *path = PathBuf::from(value);
                    } else {
                        *limit = match value {
                            "" | "none" => None,
                            v => Some(parse_num(key, v)?),
                        };
                    }
                }
                DatasetSpec::Synthetic { .. } => {
                    return Err(Error::Config(format!("{key} needs dataset=cifar10 first")))
                }
            },
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "min_lr" => self.min_lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "lr_schedule" => {
                if value != "cosine" {
                    return Err(Error::Config(format!("unknown lr_schedule '{value}'")));
                }
                self.lr_schedule = LrSchedule::Cosine;
            }
            "seed" => self.seed = parse_num(key, value)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr
            && self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= lr, lr > 0 and weight_decay >= 0 (lr {}, min_lr {}, weight_decay {})",
                self.lr, self.min_lr, self.weight_decay
            )));
        }
        match &self.dataset {
            DatasetSpec::Synthetic { n_train, n_val, .. } => {
                if *n_train == 0 || *n_val == 0 {
                    return Err(Error::Config("n_train and n_val must be positive".into()));
                }
                if self.backbone.n_classes != 4 {
                    return Err(Error::Config(
                        "the synthetic dataset has exactly 4 classes".into(),
                    ));
                }
            }
            DatasetSpec::Cifar10 { path, .. } => {
                if !path.is_dir() {
                    return Err(Error::Config(format!(
                        "cifar_path '{}' is not a directory",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical `key=value` text; [`ExperimentConfig::from_kv_str`] reads it back.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        let b = &self.backbone;
        let mut out = vec![
            ("image_size", b.image_size.to_string()),
            ("patch_size", b.patch_size.to_string()),
            ("channels", b.channels.to_string()),
            ("d_model", b.d_model.to_string()),
            ("depth", b.depth.to_string()),
            ("n_heads", b.n_heads.to_string()),
            ("group_size", b.group_size.to_string()),
            ("mlp_ratio", b.mlp_ratio.to_string()),
            ("grouping", b.grouping.label()),
            ("posenc", b.posenc.label().into()),
            ("consumption", b.consumption.label().into()),
            ("n_classes", b.n_classes.to_string()),
            ("precision", b.precision.label().into()),
        ];
        match &self.dataset {
            DatasetSpec::Synthetic {
                seed,
                n_train,
                n_val,
            } => out.extend([
                ("dataset", "synthetic".into()),
                ("data_seed", seed.to_string()),
                ("n_train", n_train.to_string()),
                ("n_val", n_val.to_string()),
            ]),
            DatasetSpec::Cifar10 { path, limit } => out.extend([
                ("dataset", "cifar10".into()),
                ("cifar_path", path.display().to_string()),
                (
                    "cifar_limit",
                    limit.map_or("none".into(), |l| l.to_string()),
                ),
            ]),
        }
        out.extend([
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("min_lr", format!("{:?}", self.min_lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("lr_schedule", "cosine".into()),
            ("seed", self.seed.to_string()),
        ]);
        if let Some(dir) = &self.output_dir {
            out.push(("output_dir", dir.display().to_string()));
        }
        out
    }

    /// [`fingerprint_text`] of the canonical text without `output_dir`.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .kv_pairs()
            .into_iter()
            .filter(|(k, _)| *k != "output_dir")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fingerprint_text(&text)
    }
}

/// 64-bit FNV-1a of `text` as 16 hex digits.
pub fn fingerprint_text(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
