//! Run configuration file.
//!
//! One `key = value` pair per line. Keys are dotted and namespaced
//! (`data.`, `model.`, `gsgn.`, `train.`, `schedule.`); values are JSON.
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected.
//!
//! ```text
//! # small smoke run
//! data.n_train = 200
//! model.hidden_dim = 16
//! train.fusion_mode = "gsgn"
//! schedule.stages = [{"lo": 0, "hi": null, "fbank": 0.3, "unit": 0.0}]
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::branch::StageSchedule;
use crate::datagen::CorpusSpec;
use crate::error::{Error, Result};
use crate::gsgn::GateConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Gsgn,
    Concat,
    FbankOnly,
    UnitOnly,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Gsgn => "gsgn",
            FusionMode::Concat => "concat",
            FusionMode::FbankOnly => "fbank_only",
            FusionMode::UnitOnly => "unit_only",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Add uniform noise to the fbank input of every training batch.
    Sum,
    /// Replace the unit view with uniform noise in every partition.
    Replace,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown noise mode {s:?}")))
    }
}

/// Architecture settings that do not depend on the corpus. View widths
/// and vocabulary size are filled in from the corpus at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub acoustic_layers: usize,
    pub textual_layers: usize,
    pub decoder_layers: usize,
    pub linear_mode: bool,
    pub residual: bool,
    pub tie_input_projections: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden_dim: m.hidden_dim,
            acoustic_layers: m.acoustic_layers,
            textual_layers: m.textual_layers,
            decoder_layers: m.decoder_layers,
            linear_mode: m.linear_mode,
            residual: m.residual,
            tie_input_projections: m.tie_input_projections,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, fbank_dim: usize, unit_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            acoustic_layers: self.acoustic_layers,
            textual_layers: self.textual_layers,
            decoder_layers: self.decoder_layers,
            vocab_size,
            fbank_dim,
            unit_dim,
            linear_mode: self.linear_mode,
            residual: self.residual,
            tie_input_projections: self.tie_input_projections,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub patience: usize,
    /// Probe per-view gradients every this many steps; 0 disables probing.
    pub probe_every: usize,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    /// Sample a branch per example instead of per batch.
    pub per_example_sampling: bool,
    /// Evaluate with stochastic branch sampling from the last stage.
    pub paper_inference: bool,
    /// Number of best checkpoints averaged at the end of a run.
    pub avg_best: usize,
    pub noise: Option<NoiseMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            patience: 10,
            probe_every: 1,
            fusion_mode: FusionMode::Gsgn,
            seed: 0,
            per_example_sampling: false,
            paper_inference: false,
            avg_best: 10,
            noise: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("train.warmup_steps must be positive".into()));
        }
        if self.avg_best == 0 {
            return Err(Error::Config("train.avg_best must be positive".into()));
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 {
            return Err(Error::Config("train.peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(
                "train.label_smoothing must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub stages: StageSchedule,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: CorpusSpec,
    pub model: ModelSection,
    pub gsgn: GateConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.gsgn.validate()?;
        self.train.validate()?;
        self.model
            .resolve(
                self.data.fbank_dim,
                self.data.effective_unit_dim(),
                self.data.vocab_size,
            )
            .validate()
    }

    /// Parses the dotted-key text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut root = Map::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value: Value = serde_json::from_str(value.trim()).map_err(|e| {
                Error::Config(format!(
                    "line {}: value for {key} is not JSON: {e}",
                    lineno + 1
                ))
            })?;
            set_dotted(&mut root, key, value)
                .map_err(|m| Error::Config(format!("line {}: {m}", lineno + 1)))?;
        }
        Self::from_value(Value::Object(root))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = json` override on top of this config.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut root = match serde_json::to_value(&*self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        set_dotted(&mut root, key, value).map_err(Error::Config)?;
        *self = Self::from_value(Value::Object(root))?;
        Ok(())
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config back to the dotted-key format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(sections) = v {
            for (section, body) in sections {
                if let Value::Object(fields) = body {
                    for (k, val) in fields {
                        out.push_str(&format!("{section}.{k} = {val}\n"));
                    }
                }
            }
        }
        out
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

fn set_dotted(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(format!("key {key:?} must look like `section.field`"));
    }
    let section = root
        .entry(parts[0].to_string())
        .or_insert_with(|| Value::Object(Map::new()));
    match section {
        Value::Object(m) => {
            m.insert(parts[1].to_string(), value);
            Ok(())
        }
        _ => Err(format!("{} is not a section", parts[0])),
    }
}
