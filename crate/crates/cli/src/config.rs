//! Flat `key = value` run configuration.
//!
//! Keys carry a one-level section prefix (`model.depth = 4`). Blank lines and
//! lines starting with `#` are ignored. Missing keys take their defaults;
//! unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tlalign::mixing::MixStrategy;
use tlalign::trainer::{MixConfig, OptimizerKind, TrainConfig};
use tlalign::vit::{ModelConfig, Pooling};

use crate::{file_error, CliError, Result};

pub const MNIST_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// IDX files in `dir`; the first `*_limit` examples of each split are used.
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
        seed: u64,
    },
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Mnist { .. } => MNIST_CLASSES,
            DataSource::Synthetic { classes, .. } => *classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub output: PathBuf,
    pub precision: Precision,
    /// Held-out mixed samples traced in the diagnostics report.
    pub diagnostic_samples: usize,
    /// Write every mixing decision to `mixlog.jsonl`.
    pub log_mixes: bool,
}

impl Default for RunConfig {
    /// Desk preset on the MNIST 10k/2k subset.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::Mnist {
                dir: PathBuf::from("data/mnist"),
                train_limit: Some(10_000),
                test_limit: Some(2_000),
            },
            output: PathBuf::from("runs/default"),
            precision: Precision::F32,
            diagnostic_samples: 8,
            log_mixes: false,
        }
    }
}

/// The four IDX files of an MNIST directory, plain or gzipped.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn locate(dir: &Path) -> Result<Self> {
        let find = |stem: &str| -> Result<PathBuf> {
            let plain = dir.join(stem);
            if plain.is_file() {
                return Ok(plain);
            }
            let gz = dir.join(format!("{stem}.gz"));
            if gz.is_file() {
                return Ok(gz);
            }
            Err(CliError::Invalid(format!(
                "{} does not exist (run scripts/fetch_mnist.sh)",
                plain.display()
            )))
        };
        Ok(Self {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn get<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((line, v)) => parse(&v).ok_or_else(|| CliError::Config {
                line,
                message: format!("invalid value {v:?} for {key}"),
            }),
        }
    }

    fn num<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        self.get(key, default, |s| s.parse().ok())
    }

    fn limit(&mut self, key: &str, default: Option<usize>) -> Result<Option<usize>> {
        self.get(key, default, |s| match s {
            "all" => Some(None),
            _ => s.parse().ok().map(Some),
        })
    }
}

fn on_off(s: &str) -> Option<bool> {
    match s {
        "on" | "true" => Some(true),
        "off" | "false" => Some(false),
        _ => None,
    }
}

fn on_off_str(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn limit_str(l: Option<usize>) -> String {
    l.map_or_else(|| "all".to_string(), |n| n.to_string())
}

impl RunConfig {
    /// Parses config text without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let Some((k, v)) = s.split_once('=') else {
                return Err(CliError::Config {
                    line,
                    message: format!("expected `key = value`, got {s:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.split('.').count() != 2 || k.split('.').any(str::is_empty) {
                return Err(CliError::Config {
                    line,
                    message: format!("key {k:?} must have the form section.name"),
                });
            }
            if let Some((first, _)) = map.insert(k.to_string(), (line, v.to_string())) {
                return Err(CliError::Config {
                    line,
                    message: format!("duplicate key {k} (first set on line {first})"),
                });
            }
        }
        let mut e = Entries { map };
        let d = RunConfig::default();

        let dm = &d.model;
        let model = ModelConfig {
            image_size: e.num("model.image_size", dm.image_size)?,
            patch_size: e.num("model.patch_size", dm.patch_size)?,
            channels: e.num("model.channels", dm.channels)?,
            depth: e.num("model.depth", dm.depth)?,
            dim: e.num("model.dim", dm.dim)?,
            heads: e.num("model.heads", dm.heads)?,
            mlp_ratio: e.num("model.mlp_ratio", dm.mlp_ratio)?,
            num_classes: e.num("model.num_classes", dm.num_classes)?,
            pooling: e.get("model.pooling", dm.pooling, Pooling::parse)?,
        };

        let dt = &d.train;
        let mix = MixConfig {
            strategy: e.get("mix.strategy", dt.mix.strategy, MixStrategy::parse)?,
            apply_prob: e.num("mix.apply_prob", dt.mix.apply_prob)?,
            mixup_alpha: e.num("mix.mixup_alpha", dt.mix.mixup_alpha)?,
            patch_prob: e.num("mix.patch_prob", dt.mix.patch_prob)?,
            block_budget: e.num("mix.block_budget", dt.mix.block_budget)?,
        };
        let train = TrainConfig {
            epochs: e.num("train.epochs", dt.epochs)?,
            batch_size: e.num("train.batch_size", dt.batch_size)?,
            learning_rate: e.num("train.learning_rate", dt.learning_rate)?,
            weight_decay: e.num("train.weight_decay", dt.weight_decay)?,
            optimizer: e.get("train.optimizer", dt.optimizer, OptimizerKind::parse)?,
            momentum: e.num("train.momentum", dt.momentum)?,
            warmup_epochs: e.num("train.warmup_epochs", dt.warmup_epochs)?,
            mix,
            tl_align: e.get("train.tl_align", dt.tl_align, on_off)?,
            seed: e.num("train.seed", dt.seed)?,
            label_smoothing: e.num("train.label_smoothing", dt.label_smoothing)?,
        };

        let source_line = e.map.get("data.source").map(|(l, _)| *l);
        let source = e
            .take("data.source")
            .map_or_else(|| "mnist".to_string(), |(_, v)| v);
        let data = match source.as_str() {
            "mnist" => {
                let DataSource::Mnist {
                    dir,
                    train_limit,
                    test_limit,
                } = &d.data
                else {
                    unreachable!("default source is mnist")
                };
                DataSource::Mnist {
                    dir: e.get("data.dir", dir.clone(), |s| Some(PathBuf::from(s)))?,
                    train_limit: e.limit("data.train_limit", *train_limit)?,
                    test_limit: e.limit("data.test_limit", *test_limit)?,
                }
            }
            "synthetic" => DataSource::Synthetic {
                classes: e.num("data.classes", model.num_classes)?,
                train_per_class: e.num("data.train_per_class", 100)?,
                test_per_class: e.num("data.test_per_class", 20)?,
                noise: e.num("data.noise", 0.1)?,
                seed: e.num("data.seed", 0)?,
            },
            other => {
                return Err(CliError::Config {
                    line: source_line.unwrap_or(0),
                    message: format!("unknown data.source {other:?} (mnist or synthetic)"),
                })
            }
        };

        let cfg = RunConfig {
            model,
            train,
            data,
            output: e.get("run.output", d.output, |s| Some(PathBuf::from(s)))?,
            precision: e.get("run.precision", d.precision, Precision::parse)?,
            diagnostic_samples: e.num("run.diagnostic_samples", d.diagnostic_samples)?,
            log_mixes: e.get("run.log_mixes", d.log_mixes, on_off)?,
        };
        if let Some((key, (line, _))) = e.map.into_iter().next() {
            return Err(CliError::Config {
                line,
                message: format!("unknown key {key} for data.source = {source}"),
            });
        }
        Ok(cfg)
    }

    /// Reads, parses and validates a config file, including the data paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(file_error(path))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config { line, message } => CliError::Config {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        cfg.validate()?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.data.num_classes() {
            return Err(CliError::Invalid(format!(
                "model.num_classes = {} but the dataset has {} classes",
                self.model.num_classes,
                self.data.num_classes()
            )));
        }
        if let DataSource::Mnist { .. } = self.data {
            if self.model.channels != 1 || self.model.image_size < 28 {
                return Err(CliError::Invalid(
                    "MNIST needs model.channels = 1 and model.image_size >= 28".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<()> {
        if let DataSource::Mnist { dir, .. } = &self.data {
            MnistFiles::locate(dir)?;
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, shortest round-trip numbers.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        let m = &self.model;
        kv("model.image_size", &m.image_size);
        kv("model.patch_size", &m.patch_size);
        kv("model.channels", &m.channels);
        kv("model.depth", &m.depth);
        kv("model.dim", &m.dim);
        kv("model.heads", &m.heads);
        kv("model.mlp_ratio", &m.mlp_ratio);
        kv("model.num_classes", &m.num_classes);
        kv("model.pooling", &m.pooling.as_str());
        let t = &self.train;
        kv("train.epochs", &t.epochs);
        kv("train.batch_size", &t.batch_size);
        kv("train.learning_rate", &t.learning_rate);
        kv("train.weight_decay", &t.weight_decay);
        kv("train.optimizer", &t.optimizer.as_str());
        kv("train.momentum", &t.momentum);
        kv("train.warmup_epochs", &t.warmup_epochs);
        kv("train.tl_align", &on_off_str(t.tl_align));
        kv("train.seed", &t.seed);
        kv("train.label_smoothing", &t.label_smoothing);
        kv("mix.strategy", &t.mix.strategy.as_str());
        kv("mix.apply_prob", &t.mix.apply_prob);
        kv("mix.mixup_alpha", &t.mix.mixup_alpha);
        kv("mix.patch_prob", &t.mix.patch_prob);
        kv("mix.block_budget", &t.mix.block_budget);
        match &self.data {
            DataSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                kv("data.source", &"mnist");
                kv("data.dir", &dir.display());
                kv("data.train_limit", &limit_str(*train_limit));
                kv("data.test_limit", &limit_str(*test_limit));
            }
            DataSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                noise,
                seed,
            } => {
                kv("data.source", &"synthetic");
                kv("data.classes", classes);
                kv("data.train_per_class", train_per_class);
                kv("data.test_per_class", test_per_class);
                kv("data.noise", noise);
                kv("data.seed", seed);
            }
        }
        kv("run.output", &self.output.display());
        kv("run.precision", &self.precision.as_str());
        kv("run.diagnostic_samples", &self.diagnostic_samples);
        kv("run.log_mixes", &on_off_str(self.log_mixes));
        s
    }

    /// SHA-256 of the canonical text, hex encoded. The output directory is
    /// left out so a run reproduces the same files wherever it is written.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output = PathBuf::new();
        hex::encode(Sha256::digest(cfg.serialize().as_bytes()))
    }
}
