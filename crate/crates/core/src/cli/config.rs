//! Flat run configuration: TOML file, then `--key value` overrides, then
//! `QUANTBENCH_SEED` for an unset seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::mpq::{AllowedBits, LabelSource, MPQConfig};
use crate::network::{FirstLastPolicy, PoolStrategy, ResidualStrategy};
use crate::pipeline::{default_budget, CalibrationConfig, TrainConfig};
use crate::quantize::{ObserverKind, DEFAULT_PERCENTILE};

pub const SEED_ENV: &str = "QUANTBENCH_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Spirals,
    Images,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    ToyResnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverChoice {
    Minmax,
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model_path: Option<PathBuf>,

    pub dataset: DatasetKind,
    pub classes: usize,
    pub dims: usize,
    pub n_per_class: usize,
    pub noise: f64,
    pub image_hw: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,

    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,

    pub weight_bits: u32,
    pub act_bits: u32,
    pub weight_symmetric: bool,
    pub act_symmetric: bool,
    pub weight_per_channel: bool,
    pub act_observer: ObserverChoice,
    pub percentile: f64,
    pub calibration_budget: Option<usize>,
    pub residual_strategy: ResidualStrategy,
    pub quantize_skip: bool,
    pub pool_strategy: PoolStrategy,
    pub first_last: FirstLastPolicy,

    pub lambda1: f64,
    pub lambda2: f64,
    pub target_w: f64,
    pub target_a: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub samples: usize,
    /// `"2..8"` for any integer in a range, `"2,4,8"` for a set.
    pub allowed_bits: String,
    pub include_first_last_in_avg: bool,
    pub label_source: LabelSource,
    pub ema_decay: f64,
    pub learn_act_ranges: bool,

    /// Number of consecutive seeds, starting at `seed`, that `observe` runs.
    pub seeds: usize,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mpq = MPQConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            model_path: None,
            dataset: DatasetKind::Blobs,
            classes: 4,
            dims: 8,
            n_per_class: 300,
            noise: 0.9,
            image_hw: 8,
            idx_images: None,
            idx_labels: None,
            model: ModelKind::Mlp,
            hidden: vec![16, 128, 16],
            width: 8,
            depth: 2,
            epochs: train.epochs,
            train_lr: train.lr,
            train_batch: train.batch_size,
            weight_bits: 8,
            act_bits: 8,
            weight_symmetric: false,
            act_symmetric: false,
            weight_per_channel: true,
            act_observer: ObserverChoice::Minmax,
            percentile: DEFAULT_PERCENTILE,
            calibration_budget: None,
            residual_strategy: ResidualStrategy::HighPrecisionAdd,
            quantize_skip: false,
            pool_strategy: PoolStrategy::HighPrecisionRequant,
            first_last: FirstLastPolicy::Pin8Bit,
            lambda1: mpq.lambda1,
            lambda2: mpq.lambda2,
            target_w: mpq.target_w,
            target_a: mpq.target_a,
            steps: mpq.steps,
            batch_size: mpq.batch_size,
            lr: mpq.lr,
            samples: mpq.samples,
            allowed_bits: "2..8".into(),
            include_first_last_in_avg: mpq.include_first_last_in_avg,
            label_source: mpq.label_source,
            ema_decay: mpq.ema_decay,
            learn_act_ranges: mpq.learn_act_ranges,
            seeds: 5,
            parallel: false,
        }
    }
}

/// Parses `"lo..hi"` or a comma-separated set.
pub fn parse_allowed_bits(s: &str) -> Result<AllowedBits> {
    let num = |t: &str| {
        t.trim()
            .parse::<u32>()
            .map_err(|_| QuantError::Config(format!("bad bitwidth `{t}` in allowed_bits `{s}`")))
    };
    let a = match s.split_once("..") {
        Some((lo, hi)) => AllowedBits::AnyInteger {
            min: num(lo)?,
            max: num(hi)?,
        },
        None => AllowedBits::set(s.split(',').map(num).collect::<Result<Vec<_>>>()?)?,
    };
    a.validate()?;
    Ok(a)
}

/// Reads a command-line value as a TOML literal, falling back to a string
/// (`4`, `true`, `[16, 32]` and `16,32` are typed; `high_precision_add` is text).
fn override_value(key: &str, raw: &str) -> toml::Value {
    let literal = |s: &str| -> Option<toml::Value> {
        toml::from_str::<toml::Table>(&format!("v = {s}")).ok().and_then(|mut t| t.remove("v"))
    };
    if key == "allowed_bits" {
        return toml::Value::String(raw.to_string());
    }
    literal(raw)
        .or_else(|| raw.contains(',').then(|| literal(&format!("[{raw}]"))).flatten())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Resolves a configuration from optional file text and overrides.
    pub fn resolve(file_text: Option<&str>, overrides: &[(&str, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut table: toml::Table = match file_text {
            Some(t) => toml::from_str(t).map_err(|e| QuantError::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.to_string(), override_value(k, v));
        }
        if !table.contains_key("seed") {
            if let Some(s) = env_seed {
                let seed = s
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| QuantError::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
                table.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| QuantError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| QuantError::io(p, e))?),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), overrides, env.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        parse_allowed_bits(&self.allowed_bits)?;
        self.mpq().validate()?;
        self.observer().validate()?;
        if !(2..=32).contains(&self.weight_bits) || !(2..=32).contains(&self.act_bits) {
            return Err(QuantError::Config("weight_bits and act_bits must be within 2..=32".into()));
        }
        if self.seeds == 0 {
            return Err(QuantError::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QuantError::Serde(e.to_string()))
    }

    pub fn observer(&self) -> ObserverKind {
        match self.act_observer {
            ObserverChoice::Minmax => ObserverKind::MinMax,
            ObserverChoice::Percentile => ObserverKind::Percentile(self.percentile),
        }
    }

    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            act_observer: self.observer(),
            budget: self.calibration_budget.unwrap_or_else(|| default_budget(self.observer())),
            ..CalibrationConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.train_lr,
            batch_size: self.train_batch,
        }
    }

    pub fn mpq(&self) -> MPQConfig {
        MPQConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            target_w: self.target_w,
            target_a: self.target_a,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            samples: self.samples,
            allowed_bits: parse_allowed_bits(&self.allowed_bits).unwrap_or_default(),
            include_first_last_in_avg: self.include_first_last_in_avg,
            pin_first_last: self.first_last == FirstLastPolicy::Pin8Bit,
            label_source: self.label_source,
            ema_decay: self.ema_decay,
            learn_act_ranges: self.learn_act_ranges,
        }
    }
}
