//! Run configuration: TOML file, dotted-key overrides, eager validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::evaluator::Protocol;
use crate::objectives::{LossConfig, LossKind};
use crate::text_encoder::BackboneMode;
use crate::visual_encoder::Enhancement;

pub const OUTPUT_ROOT_ENV: &str = "ITR_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "default".into(),
            output_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            deterministic: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    pub test_split: String,
    pub num_regions: usize,
    pub max_length: usize,
    pub d_i: usize,
    pub d_t: usize,
    pub d_ic: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            train_split: "train".into(),
            val_split: "val".into(),
            test_split: "test".into(),
            num_regions: 36,
            max_length: 100,
            d_i: 2048,
            d_t: 768,
            d_ic: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub d_t: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            d_t: 32,
            hidden: 32,
            mlp_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_j: usize,
    pub enhancement: Enhancement,
    pub text_backbone: BackboneMode,
    pub backbone_id: String,
    pub pool: PoolSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_j: 1024,
            enhancement: Enhancement::Sge,
            text_backbone: BackboneMode::Precomputed,
            backbone_id: "bert-base-uncased".into(),
            pool: PoolSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocoSection {
    pub enabled: bool,
    pub momentum: f64,
    pub queue_size: usize,
}

impl Default for MocoSection {
    fn default() -> Self {
        Self {
            enabled: true,
            momentum: 0.999,
            queue_size: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub triplet_margin: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            kind: d.kind,
            gamma: d.gamma,
            epsilon: d.epsilon,
            lambda: d.lambda,
            triplet_margin: d.triplet_margin,
        }
    }
}

impl LossSection {
    pub fn to_loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.kind,
            gamma: self.gamma,
            epsilon: self.epsilon,
            lambda: self.lambda,
            triplet_margin: self.triplet_margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop (after checkpointing) once this many steps have run in total.
    pub stop_after_steps: Option<u64>,
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 5e-4,
            lr_decay_epochs: 10,
            lr_decay_factor: 10.0,
            weight_decay: 1e-4,
            batch_size: 128,
            grad_clip: 2.0,
            stop_after_steps: None,
            eval_batch_size: 256,
        }
    }
}

impl TrainSection {
    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub moco: MocoSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::new(key, message)
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `a.b.c = value` in a table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err(key, "malformed key"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| err(key, format!("`{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Pulls the dotted key out of a deserialization message when it has one.
fn key_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.split('`').nth(1) {
        if msg.starts_with("unknown field") {
            return rest.to_string();
        }
    }
    "config".into()
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let text = toml::to_string(&table).map_err(|e| err("config", e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| err(&key_of(&e), e.message().to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` (if any), applies `key=value` overrides, validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| err("config", format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| err("config", e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data.root.is_none() {
            return Err(err("data.root", "required"));
        }
        let positive = [
            ("data.num_regions", self.data.num_regions),
            ("data.max_length", self.data.max_length),
            ("data.d_i", self.data.d_i),
            ("data.d_t", self.data.d_t),
            ("model.d_j", self.model.d_j),
            ("model.pool.d_t", self.model.pool.d_t),
            ("model.pool.hidden", self.model.pool.hidden),
            ("model.pool.mlp_hidden", self.model.pool.mlp_hidden),
            ("train.eval_batch_size", self.train.eval_batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(err(k, "must be positive"));
            }
        }
        if self.model.pool.d_t % 2 != 0 {
            return Err(err("model.pool.d_t", "must be even"));
        }
        if self.model.enhancement == Enhancement::Cge && self.data.d_ic == 0 {
            return Err(err("data.d_ic", "cge needs CLIP features"));
        }
        if self.model.text_backbone != BackboneMode::Precomputed {
            return Err(err(
                "model.text_backbone",
                "only precomputed token features are available in this build",
            ));
        }
        let t = &self.train;
        if t.batch_size <= 1 {
            return Err(err("train.batch_size", "must be > 1"));
        }
        if !(t.lr > 0.0) {
            return Err(err("train.lr", "must be > 0"));
        }
        if !(t.lr_decay_factor > 0.0) {
            return Err(err("train.lr_decay_factor", "must be > 0"));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(err("train.weight_decay", "must be >= 0"));
        }
        if !(t.grad_clip >= 0.0) {
            return Err(err("train.grad_clip", "must be >= 0"));
        }
        if t.epochs != 0 && t.epochs <= t.lr_decay_epochs {
            return Err(err(
                "train.epochs",
                format!("must exceed train.lr_decay_epochs ({})", t.lr_decay_epochs),
            ));
        }
        if self.moco.enabled {
            let q = self.moco.queue_size;
            if q < t.batch_size {
                return Err(err("moco.queue_size", "must be >= train.batch_size"));
            }
            if q % t.batch_size != 0 {
                return Err(err(
                    "moco.queue_size",
                    format!("{q} is not a multiple of train.batch_size {}", t.batch_size),
                ));
            }
            if !(0.0..1.0).contains(&self.moco.momentum) {
                return Err(err("moco.momentum", "must lie in [0, 1)"));
            }
        }
        self.loss
            .to_loss_config()
            .validate()
            .map_err(|m| err(m.split(' ').next().unwrap_or("loss"), m.clone()))?;
        Ok(())
    }

    pub fn data_root(&self) -> &Path {
        self.data.root.as_deref().expect("validated")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of every setting that influences training results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.name.clear();
        c.run.output_dir = PathBuf::new();
        c.train.stop_after_steps = None;
        c.eval = EvalSection::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `$ITR_OUTPUT_ROOT/<output_dir>/<name>` (or relative to the cwd).
    pub fn run_dir(&self) -> PathBuf {
        let base = match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.run.output_dir.is_relative() => PathBuf::from(root).join(&self.run.output_dir),
            _ => self.run.output_dir.clone(),
        };
        base.join(&self.run.name)
    }
}
