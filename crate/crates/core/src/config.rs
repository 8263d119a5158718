//! Run configuration: JSON form, canonical hash, dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CropParams;
use crate::error::{Error, Result};
use crate::loss::{BalancerMode, LossWeights};
use crate::student::StudentConfig;
use crate::teachers::{TeacherConfig, TeacherProfile};

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "AMRD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub balancer: BalancerMode,
    /// AdaLoss EMA momentum.
    pub momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), balancer: BalancerMode::Naive, momentum: 0.99 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub world_size: usize,
    /// Fraction of ranks per group; equal shares when empty.
    pub split: Vec<f64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { world_size: 2, split: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_classes: usize,
    /// Draw from a fixed pool of this many images; a fresh image every draw when unset.
    pub pool_size: Option<usize>,
    /// Apply the random resized crop.
    pub augment: bool,
    pub crop: CropParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_classes: 6, pool_size: None, augment: true, crop: CropParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Fixed student input side; each group's own resolution when unset.
    pub student_resolution: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
            warmup_steps: 0,
            checkpoint_every: 500,
            student_resolution: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    pub bank_size: usize,
    pub query_size: usize,
    pub resolution: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_train_size: usize,
    pub probe_test_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            temperature: 0.07,
            bank_size: 240,
            query_size: 120,
            resolution: 32,
            probe_steps: 2000,
            probe_lr: 1e-3,
            probe_train_size: 64,
            probe_test_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub student: StudentConfig,
    pub teachers: Vec<TeacherConfig>,
    pub loss: LossConfig,
    pub partition: PartitionConfig,
    pub data: DataConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            student: StudentConfig::default(),
            teachers: TeacherProfile::ALL.iter().enumerate().map(|(i, &p)| TeacherConfig::new(p, 100 + i as u64)).collect(),
            loss: LossConfig::default(),
            partition: PartitionConfig::default(),
            data: DataConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Reads a config file, naming the path on failure.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// blake3 of the canonical (compact, field-ordered) serialization.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(&serde_json::to_value(self).expect("config serializes")).expect("value serializes");
        blake3::hash(&canonical).to_hex().to_string()
    }

    /// Applies `dotted.path=value` overrides; the value is parsed as JSON and
    /// falls back to a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let mut set = Vec::new();
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not path=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set.push((path, value.is_null()));
            set_path(&mut tree, path, value)?;
        }
        let out: Self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
        // unknown keys are dropped by deserialization; catch typos here
        let back = serde_json::to_value(&out).expect("config serializes");
        for (path, null) in set {
            let pointer = format!("/{}", path.replace('.', "/"));
            if back.pointer(&pointer).is_none() && !null {
                return Err(Error::Config(format!("unknown config key {path:?}")));
            }
        }
        Ok(out)
    }

    /// Replaces the seed with `AMRD_SEED` when it is set.
    pub fn with_seed_env(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.loss.weights.validate()?;
        if self.teachers.is_empty() {
            return Err(Error::Config("at least one teacher is required".into()));
        }
        let mut ids: Vec<&str> = self.teachers.iter().map(|t| t.profile.id()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each teacher profile may appear once".into()));
        }
        if self.data.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be at least 2".into()));
        }
        if self.data.pool_size == Some(0) {
            return Err(Error::Config("data.pool_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.loss.momentum) {
            return Err(Error::Config("loss.momentum must be in [0, 1)".into()));
        }
        let t = &self.trainer;
        if t.steps == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 {
            return Err(Error::Config("trainer needs steps > 0, lr > 0, betas in [0,1), eps > 0".into()));
        }
        if self.eval.k == 0 || self.eval.temperature <= 0.0 {
            return Err(Error::Config("eval.k and eval.temperature must be positive".into()));
        }
        if let Some(&b) = self.teachers.iter().filter_map(|t| t.per_rank_batch.as_ref()).find(|&&b| b == 0) {
            return Err(Error::Config(format!("per_rank_batch {b} must be positive")));
        }
        Ok(())
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key.parse().map_err(|_| Error::Config(format!("{path}: {key:?} is not an index")))?;
                let slot = items.get_mut(idx).ok_or_else(|| Error::Config(format!("{path}: index {idx} out of range")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{path}: {key:?} is not inside an object"))),
        };
    }
    Err(Error::Config("empty override path".into()))
}
