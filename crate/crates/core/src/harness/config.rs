//! Run configuration: presets, JSON deep-merge, validation and hashing.
//!
//! A configuration is resolved in three layers, later layers winning:
//! the preset, an optional JSON file, then command-line overrides. Every
//! layer is a JSON object merged key by key, and the result must deserialize
//! into [`TrainConfig`] with no unknown fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cluster::Linkage;
use crate::error::{Error, Result};
use crate::masking::{MaskSchedule, MaskStrategy};
use crate::model::{ModelConfig, Pooling};
use crate::objectives::{LossConfig, LossWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Paper,
    #[default]
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or toy)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_epochs: usize,
    /// Cosine decay after warmup; constant `peak` otherwise.
    pub cosine: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Shapes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub train: usize,
    pub test: usize,
    /// Held-out images whose attention drives evolved masking.
    pub probe: usize,
    pub classes: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Recognized so paper configs parse; only 0 is supported.
    pub color_jitter: f64,
    /// Recognized so paper configs parse; only `false` is supported.
    pub random_resize_crop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub linkage: Linkage,
    pub em_iters: usize,
    /// Renormalize attention rows after dropping the CLS row and column.
    pub renormalize_attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub knn_k: usize,
    /// Epochs between kNN evaluations; `None` means every 10% of training.
    pub knn_every: Option<usize>,
    pub pooling: Pooling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TeacherSource {
    Synthetic,
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    /// `mask.total_epochs` always follows `epochs`.
    pub mask: MaskSchedule,
    pub clustering: ClusteringConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub lr: LrSchedule,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub teacher: TeacherSource,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Adds wall-clock seconds to metrics rows, which makes logs differ
    /// between runs.
    pub record_wall_time: bool,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
}

/// Fields that do not change results and are left out of the config hash.
const UNHASHED: [&str; 3] = ["out_dir", "threads", "record_wall_time"];

impl TrainConfig {
    /// Full-scale ViT-B/16 pre-training settings. Not runnable at desk scale
    /// (stochastic depth is refused by validation) but kept as the reference.
    pub fn paper() -> Self {
        TrainConfig {
            preset: Preset::Paper,
            model: ModelConfig::paper(),
            mask: MaskSchedule::paper(),
            clustering: ClusteringConfig {
                linkage: Linkage::NnChain,
                em_iters: 20,
                renormalize_attention: true,
            },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adamw,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.05,
                grad_clip: Some(3.0),
            },
            lr: LrSchedule {
                peak: 1.5e-3,
                min: 1e-5,
                warmup_epochs: 10,
                cosine: true,
            },
            epochs: 300,
            steps_per_epoch: None,
            batch_size: 2048,
            seed: 0,
            data: DataConfig {
                kind: DatasetKind::Shapes,
                train: 512,
                test: 256,
                probe: 16,
                classes: 5,
                noise: 0.1,
                color_jitter: 0.4,
                random_resize_crop: true,
            },
            eval: EvalConfig {
                knn_k: 20,
                knn_every: None,
                pooling: Pooling::Cls,
            },
            teacher: TeacherSource::Synthetic,
            checkpoint_every: 0,
            record_wall_time: false,
            out_dir: PathBuf::from("runs/paper"),
            threads: 0,
        }
    }

    /// Desk-scale run: 8×8-patch toy ViT, block masking at 40%, 30 epochs of
    /// 10 steps with batch 32.
    pub fn toy() -> Self {
        TrainConfig {
            preset: Preset::Toy,
            model: ModelConfig::toy(),
            mask: MaskSchedule {
                gamma: 1.7,
                total_epochs: 30,
                c_min: 10,
                c_max: 40,
                zeta: 0.9,
                ratio: 0.4,
                strategy: MaskStrategy::Block,
            },
            clustering: ClusteringConfig {
                linkage: Linkage::Naive,
                em_iters: 20,
                renormalize_attention: true,
            },
            loss: LossConfig {
                disc_temperature: 0.3,
                ..LossConfig::default()
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adamw,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.05,
                grad_clip: Some(3.0),
            },
            lr: LrSchedule {
                peak: 1.5e-3,
                min: 1e-5,
                warmup_epochs: 2,
                cosine: true,
            },
            epochs: 30,
            steps_per_epoch: Some(10),
            batch_size: 32,
            seed: 7,
            data: DataConfig {
                kind: DatasetKind::Shapes,
                train: 512,
                test: 256,
                probe: 16,
                classes: 5,
                noise: 0.1,
                color_jitter: 0.0,
                random_resize_crop: false,
            },
            eval: EvalConfig {
                knn_k: 20,
                knn_every: None,
                pooling: Pooling::Cls,
            },
            teacher: TeacherSource::Synthetic,
            checkpoint_every: 0,
            record_wall_time: false,
            out_dir: PathBuf::from("runs/toy"),
            threads: 0,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Toy => Self::toy(),
        }
    }

    /// Copies `epochs` into the mask schedule.
    pub fn normalize(&mut self) {
        self.mask.total_epochs = self.epochs;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.mask.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "mask.total_epochs {} differs from epochs {}",
                self.mask.total_epochs, self.epochs
            )));
        }
        if self.lr.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.lr.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr.peak >= self.lr.min && self.lr.min >= 0.0 && self.lr.peak.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need peak >= min >= 0 (peak {}, min {})",
                self.lr.peak, self.lr.min
            )));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer needs betas in [0, 1), eps > 0, weight_decay >= 0".into()));
        }
        if let Some(c) = o.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        let d = &self.data;
        if d.train == 0 || d.test == 0 || d.classes < 2 || !(d.noise >= 0.0) {
            return Err(Error::Config("data needs train, test > 0, classes >= 2 and noise >= 0".into()));
        }
        if d.classes > crate::harness::data::SHAPE_CLASSES {
            return Err(Error::Config(format!(
                "the shapes dataset has {} classes, {} requested",
                crate::harness::data::SHAPE_CLASSES,
                d.classes
            )));
        }
        if d.color_jitter != 0.0 || d.random_resize_crop {
            return Err(Error::Config(
                "color_jitter and random_resize_crop are recognized but not supported; disable them".into(),
            ));
        }
        if self.mask.strategy.is_evolved() && d.probe == 0 {
            return Err(Error::Config("evolved masking needs data.probe > 0".into()));
        }
        if self.clustering.em_iters == 0 {
            return Err(Error::Config("clustering.em_iters must be at least 1".into()));
        }
        if self.eval.knn_k == 0 || self.eval.knn_k > d.train {
            return Err(Error::Config(format!(
                "knn_k {} must be in 1..={}",
                self.eval.knn_k, d.train
            )));
        }
        if self.eval.knn_every == Some(0) {
            return Err(Error::Config("knn_every must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| self.data.train.div_ceil(self.batch_size))
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn knn_every(&self) -> usize {
        self.eval.knn_every.unwrap_or_else(|| (self.epochs / 10).max(1))
    }

    pub fn weights(&self) -> LossWeights {
        self.loss.weights
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hex SHA-256 prefix of the canonical JSON form, without the fields in
    /// `UNHASHED`. `serde_json` objects keep keys sorted, so field order in
    /// the source document does not matter.
    pub fn hash(&self) -> String {
        let mut v = self.to_value();
        if let Value::Object(map) = &mut v {
            for k in UNHASHED {
                map.remove(k);
            }
        }
        config_hash(&v)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// First 16 hex digits of the SHA-256 of `v`'s canonical serialization.
pub fn config_hash(v: &Value) -> String {
    let bytes = serde_json::to_vec(&canonical(v)).expect("value serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = serde_json::Map::new();
            for k in keys {
                out.insert(k.clone(), canonical(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// Recursively merges `overlay` into `base`; objects merge by key, anything
/// else replaces.
pub fn deep_merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Sets a dotted path such as `loss.weights.pixel`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("bad config path {path:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("config path {path:?} crosses a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

pub fn from_value(v: Value) -> Result<TrainConfig> {
    let mut cfg: TrainConfig =
        serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Preset, then the file at `path`, then `overrides` (dotted path, value).
/// If the file names a preset and `preset` is `None`, the file's preset is
/// used as the base.
pub fn resolve(preset: Option<Preset>, path: Option<&Path>, overrides: &[(String, Value)]) -> Result<TrainConfig> {
    from_value(resolve_value(preset, path, overrides)?)
}

/// The merged JSON document behind [`resolve`], before deserialization.
pub fn resolve_value(preset: Option<Preset>, path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Value> {
    let file = path.map(read_json).transpose()?;
    let file_preset = file
        .as_ref()
        .and_then(|f| f.get("preset"))
        .map(|p| serde_json::from_value::<Preset>(p.clone()))
        .transpose()
        .map_err(|e| Error::Config(format!("invalid preset: {e}")))?;
    let base = preset.or(file_preset).unwrap_or_default();
    let mut v = TrainConfig::preset(base).to_value();
    if let Some(f) = &file {
        deep_merge(&mut v, f);
    }
    set_path(&mut v, "preset", serde_json::to_value(base)?)?;
    for (p, val) in overrides {
        set_path(&mut v, p, val.clone())?;
    }
    Ok(v)
}

/// Parses a `path=value` override. The value is read as JSON when it parses
/// and as a plain string otherwise, so `mask.strategy=block` works unquoted.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.trim().to_string(), value))
}
