//! Declarative experiment description, loaded from JSON.
//!
//! Overrides (`key.path=value`) and the `SQUAT_SEED` environment variable are
//! applied to the raw JSON before it is parsed, so they go through the same
//! unknown-key and range checks as the file itself.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Arch, QuantSettings};
use crate::quant::{MAX_BITS, MIN_BITS};
use crate::sharpness::{DEFAULT_RHOS, DEFAULT_STEPS, DEFAULT_SUBSET};
use crate::train::{OptimizerKind, TrainMode};

pub const SEED_ENV: &str = "SQUAT_SEED";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task label used in summaries and comparisons.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(alias = "mode", deserialize_with = "modes_one_or_many")]
    pub modes: Vec<TrainMode>,
    #[serde(default = "default_bits_w")]
    pub bits_w: u32,
    #[serde(default = "default_bits_a")]
    pub bits_a: u32,
    /// SAM radius; see [`ExperimentConfig::rho`] for the default.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "default_seeds", alias = "seed", deserialize_with = "seeds_one_or_many")]
    pub seeds: Vec<u64>,
    /// Defaults to an MLP `[d, 64, 64, classes]` sized from the dataset.
    #[serde(default)]
    pub model: Option<Arch>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub grad_scale: bool,
    #[serde(default = "yes")]
    pub quantize_activations: bool,
    #[serde(default)]
    pub exempt_first_last: bool,
    #[serde(default)]
    pub sharpness: SharpnessConfig,
    /// Run cells one after another even when the parallel backend is built in.
    #[serde(default)]
    pub sequential: bool,
    #[serde(default)]
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        #[serde(default = "default_n")]
        n: usize,
        centers: Vec<Vec<f64>>,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: String,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Step-size learning rate; defaults to `lr`.
    #[serde(default)]
    pub lr_s: Option<f64>,
    /// Rate of the plain-SGD step-size phase of SQuAT; defaults to `lr_s`.
    #[serde(default)]
    pub lr_s_sgd: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            lr: default_lr(),
            lr_s: None,
            lr_s_sgd: None,
            momentum: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    /// Ascent rate; defaults to `rho / 10` per radius.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_subset")]
    pub subset: usize,
    #[serde(default = "yes")]
    pub enabled: bool,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            rhos: default_rhos(),
            eta: None,
            steps: DEFAULT_STEPS,
            subset: DEFAULT_SUBSET,
            enabled: true,
        }
    }
}

fn default_name() -> String {
    "task".into()
}
fn default_bits_w() -> u32 {
    2
}
fn default_bits_a() -> u32 {
    8
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_n() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.1
}
fn default_spread() -> f64 {
    0.5
}
fn default_kind() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> f64 {
    1e-3
}
fn default_rhos() -> Vec<f64> {
    DEFAULT_RHOS.to_vec()
}
fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_subset() -> usize {
    DEFAULT_SUBSET
}
fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

fn modes_one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<TrainMode>, D::Error> {
    OneOrMany::<String>::deserialize(d)?
        .into_vec()
        .iter()
        .map(|s| s.parse().map_err(serde::de::Error::custom))
        .collect()
}

fn seeds_one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u64>, D::Error> {
    Ok(OneOrMany::<u64>::deserialize(d)?.into_vec())
}

/// Sets `path` (dot separated) inside `root`, creating objects on the way.
/// `value` is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(config_err(format!("override key {path:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("override {path:?} descends into a non-object")))?;
        if keys.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

fn seed_from_env(raw: &str) -> Result<Value> {
    let seeds = raw
        .split(',')
        .map(|t| t.trim().parse::<u64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| config_err(format!("{SEED_ENV}={raw:?} is not a seed list")))?;
    Ok(Value::from(seeds))
}

impl ExperimentConfig {
    /// Parses and validates after applying overrides and `env_seed`.
    pub fn from_value(mut raw: Value, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        for o in overrides {
            apply_override(&mut raw, o)?;
        }
        if let Some(s) = env_seed {
            let obj = raw
                .as_object_mut()
                .ok_or_else(|| config_err("config must be a JSON object"))?;
            obj.remove("seed");
            obj.insert("seeds".into(), seed_from_env(s)?);
        }
        let cfg: Self = serde_json::from_value(raw).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Self::from_value(raw, overrides, env_seed)
    }

    /// Reads `path`, honouring `SQUAT_SEED` from the process environment.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let env = std::env::var(SEED_ENV).ok();
        Self::from_json_str(&text, overrides, env.as_deref())
    }

    /// 0.1 for 2/3-bit weights and 0.15 from 4 bits on, unless set.
    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or(if self.bits_w <= 3 { 0.1 } else { 0.15 })
    }

    pub fn lr_s(&self) -> f64 {
        self.optimizer.lr_s.unwrap_or(self.optimizer.lr)
    }

    /// Step-size rate for `mode`: SQuAT uses `lr_s_sgd` when set.
    pub fn lr_s_for(&self, mode: TrainMode) -> f64 {
        match (mode, self.optimizer.lr_s_sgd) {
            (TrainMode::SQuAT, Some(lr)) => lr,
            _ => self.lr_s(),
        }
    }

    pub fn quant_settings(&self) -> QuantSettings {
        QuantSettings {
            bits_w: self.bits_w,
            bits_a: self.bits_a,
            quantize_activations: self.quantize_activations,
            grad_scale: self.grad_scale,
            exempt_first_last: self.exempt_first_last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, bits) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if !(MIN_BITS..=MAX_BITS).contains(&bits) {
                return Err(config_err(format!("{key}={bits} outside {MIN_BITS}..={MAX_BITS}")));
            }
        }
        if let Some(r) = self.rho {
            if !(r.is_finite() && r >= 0.0) {
                return Err(config_err(format!("rho={r} must be finite and >= 0")));
            }
        }
        if self.modes.is_empty() {
            return Err(config_err("modes is empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds is empty"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        let o = &self.optimizer;
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(o.lr) || !positive(self.lr_s()) || !positive(self.lr_s_for(TrainMode::SQuAT)) {
            return Err(config_err("learning rates must be finite and positive"));
        }
        if !(o.momentum.is_finite() && (0.0..1.0).contains(&o.momentum)) {
            return Err(config_err("momentum must lie in [0, 1)"));
        }
        let s = &self.sharpness;
        if s.rhos.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(config_err("sharpness rhos must be positive"));
        }
        if s.eta.is_some_and(|e| !(e.is_finite() && e > 0.0)) {
            return Err(config_err("sharpness eta must be positive"));
        }
        if s.steps == 0 || s.subset == 0 {
            return Err(config_err("sharpness steps and subset must be positive"));
        }
        match &self.dataset {
            DatasetSpec::TwoMoons { n, noise, .. } => {
                if *n < 2 || !(noise.is_finite() && *noise >= 0.0) {
                    return Err(config_err("two_moons needs n >= 2 and noise >= 0"));
                }
            }
            DatasetSpec::Blobs { n, centers, spread, .. } => {
                let d = centers.first().map_or(0, Vec::len);
                if centers.len() < 2 || d == 0 || centers.iter().any(|c| c.len() != d) {
                    return Err(config_err("blobs needs >= 2 centers of equal, nonzero dimension"));
                }
                if *n < centers.len() || !(spread.is_finite() && *spread >= 0.0) {
                    return Err(config_err("blobs needs n >= #centers and spread >= 0"));
                }
            }
            DatasetSpec::Csv { path, .. } => {
                if path.is_empty() {
                    return Err(config_err("csv path is empty"));
                }
            }
        }
        if let Some(Arch::Mlp { dims }) = &self.model {
            if dims.len() < 2 || dims.contains(&0) {
                return Err(config_err("mlp dims need >= 2 positive entries"));
            }
        }
        if let Some(Arch::Transformer(t)) = &self.model {
            t.validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }
}
