//! Flat `key = value` run configuration.
//!
//! Every key has a default; a file and then `--set` pairs override them.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msun_core::experiments::{DataSource, ExperimentSpec, Method};
use msun_core::{BackboneSpec, BlockKind, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("data.source", "shapes"),
    ("data.classes", "6"),
    ("data.n_train", "6000"),
    ("data.n_test", "1200"),
    ("data.train_images", ""),
    ("data.train_labels", ""),
    ("data.test_images", ""),
    ("data.test_labels", ""),
    ("data.scales", "16,32,64"),
    ("model.widths", "8,16,32"),
    ("model.blocks_per_stage", "1"),
    ("model.block", "plain"),
    ("model.stem_kernel", "5"),
    ("model.stem_stride", "2"),
    ("model.stem_pool", "true"),
    ("msun.blocks", "1"),
    ("msun.lambda", "0.1"),
    ("train.base_lr", "0.1"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "2e-5"),
    ("train.batch_size", "32"),
    ("train.epochs", "20"),
    ("train.warmup_epochs", "5"),
    ("train.lr_floor_fraction", "0.01"),
    ("train.seed", "0"),
    ("eval.sizes", "16,24,32,40,48,56,64"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => err(format!("unknown configuration key `{key}`")),
        }
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!("{origin}:{}: expected `key = value`, got `{line}`", no + 1));
            };
            self.set(k.trim(), v)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Config::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Applies `KEY=VALUE` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let Some((k, v)) = p.split_once('=') else {
                return err(format!("override `{p}` is not KEY=VALUE"));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| ConfigError(format!("bad value `{v}` for {key}: {e}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        parse_list(self.get(key)).map_err(|e| ConfigError(format!("{key}: {e}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("train.seed")
    }

    /// Sorted `key=value` lines, one per known key.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match self.get("data.source") {
            "shapes" => Ok(DataSource::Shapes {
                seed: self.seed()?,
                classes: self.parse("data.classes")?,
                n_train: self.parse("data.n_train")?,
                n_test: self.parse("data.n_test")?,
            }),
            "idx" => {
                let path = |k: &str| -> Result<PathBuf> {
                    match self.get(k) {
                        "" => err(format!("{k} is required when data.source = idx")),
                        p => Ok(PathBuf::from(p)),
                    }
                };
                Ok(DataSource::Idx {
                    train_images: path("data.train_images")?,
                    train_labels: path("data.train_labels")?,
                    test_images: path("data.test_images")?,
                    test_labels: path("data.test_labels")?,
                })
            }
            other => err(format!("data.source must be shapes or idx, got `{other}`")),
        }
    }

    pub fn scales(&self) -> Result<Vec<usize>> {
        self.list("data.scales")
    }

    /// Experiment description; `classes` overrides `data.classes` when the
    /// data decides it (IDX files).
    pub fn experiment(&self, method: Method, classes: Option<usize>) -> Result<ExperimentSpec> {
        let scales = self.scales()?;
        let input_size = *scales.iter().max().ok_or_else(|| ConfigError("data.scales is empty".into()))?;
        let block_kind: BlockKind = self
            .get("model.block")
            .parse()
            .map_err(|e| ConfigError(format!("model.block: {e}")))?;
        let backbone = BackboneSpec {
            widths: self.list("model.widths")?,
            blocks_per_stage: self.parse("model.blocks_per_stage")?,
            block_kind,
            num_classes: match classes {
                Some(c) => c,
                None => self.parse("data.classes")?,
            },
            input_size,
            in_channels: 3,
            stem_kernel: self.parse("model.stem_kernel")?,
            stem_stride: self.parse("model.stem_stride")?,
            stem_pool: self.parse("model.stem_pool")?,
        };
        let train = TrainConfig {
            base_lr: self.parse("train.base_lr")?,
            momentum: self.parse("train.momentum")?,
            weight_decay: self.parse("train.weight_decay")?,
            batch_size: self.parse("train.batch_size")?,
            epochs: self.parse("train.epochs")?,
            warmup_epochs: self.parse("train.warmup_epochs")?,
            lr_floor_fraction: self.parse("train.lr_floor_fraction")?,
            lambda: self.parse("msun.lambda")?,
            seed: self.seed()?,
            scales,
        };
        Ok(ExperimentSpec {
            method,
            backbone,
            train,
            subnet_blocks: self.parse("msun.blocks")?,
            eval_sizes: self.list("eval.sizes")?,
            threads: threads_from_env(),
        })
    }
}

/// Worker threads for batch prefetch from `MSUN_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("MSUN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Comma-separated positive integers.
pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}
