use std::path::Path;

use adapter_lens::adapters::{AdapterConfig, InterventionMode};
use adapter_lens::analysis::{LensOptions, NegativeCase, Scope, DEFAULT_PER_CLASS};
use adapter_lens::corpus::{PairConfig, Property};
use adapter_lens::model::ModelConfig;
use adapter_lens::numerics::LogisticConfig;
use adapter_lens::training::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    pub pretrain: TrainConfig,
    pub adapt: AdaptSection,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::compact(),
            corpus: CorpusSection::default(),
            pretrain: TrainConfig {
                steps: 1500,
                lr: 1e-3,
                max_eval_windows: Some(64),
                ..TrainConfig::default()
            },
            adapt: AdaptSection::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub seed: u64,
    pub pair: PairConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            seed: 0,
            pair: PairConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            adapter: AdapterConfig::default(),
            train: TrainConfig {
                steps: 1000,
                lr: 1e-4,
                phase: Phase::Adapt,
                max_eval_windows: Some(64),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub seed: u64,
    /// Length of the validation windows every analysis runs on.
    pub window_len: usize,
    /// Caps the number of windows; `None` uses the whole validation split.
    pub max_windows: Option<usize>,
    pub lens: LensOptions,
    pub norm_tokens: usize,
    pub probe_per_class: usize,
    pub negative_case: NegativeCase,
    /// `None` uses every grid value up to `d_model`.
    pub probe_ks: Option<Vec<usize>>,
    pub logistic: LogisticConfig,
    /// `None` uses powers of two up to `d_model`, plus `d_model`.
    pub intervention_features: Option<Vec<usize>>,
    pub intervention_modes: Vec<InterventionMode>,
    pub intervention_scope: Scope,
    /// Inclusive 1-based layer spans; `None` sweeps every span.
    pub ablation_spans: Option<Vec<[usize; 2]>>,
    pub pca_tokens: usize,
    pub pca_properties: Vec<Property>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window_len: 32,
            max_windows: None,
            lens: LensOptions::default(),
            norm_tokens: 2000,
            probe_per_class: DEFAULT_PER_CLASS,
            negative_case: NegativeCase::Case2,
            probe_ks: None,
            logistic: LogisticConfig::default(),
            intervention_features: None,
            intervention_modes: vec![InterventionMode::Zero, InterventionMode::MeanReplace],
            intervention_scope: Scope::AllLayers,
            ablation_spans: None,
            pca_tokens: 2000,
            pca_properties: Property::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then `--seed`, then each `--set`.
    pub fn resolve(file: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Schema(format!("cannot read config {}: {e}", path.display())))?;
            let from_file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Schema(format!("config {} is not valid JSON: {e}", path.display())))?;
            if !from_file.is_object() {
                return Err(CliError::Schema("config file must hold a JSON object".into()));
            }
            merge(&mut value, from_file);
        }
        if let Some(s) = seed {
            for key in ["corpus.seed", "pretrain.seed", "adapt.train.seed", "analysis.seed"] {
                set_path(&mut value, key, Value::from(s))?;
            }
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Schema(format!("override {o:?} is not of the form key=value")))?;
            // Values are JSON; anything that does not parse is taken as a string.
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), v)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let schema = |e: adapter_lens::Error| CliError::Schema(e.to_string());
        self.model.validate().map_err(schema)?;
        self.corpus.pair.validate().map_err(schema)?;
        if self.corpus.pair.vocab_size != self.model.vocab_size {
            return Err(CliError::Schema(format!(
                "corpus.pair.vocab_size {} differs from model.vocab_size {}",
                self.corpus.pair.vocab_size, self.model.vocab_size
            )));
        }
        self.pretrain.validate(&self.model).map_err(schema)?;
        self.adapt.train.validate(&self.model).map_err(schema)?;
        if self.pretrain.phase != Phase::Pretrain || self.adapt.train.phase != Phase::Adapt {
            return Err(CliError::Schema("pretrain.phase must be pretrain and adapt.train.phase adapt".into()));
        }
        if self.analysis.window_len < 2 || self.analysis.window_len > self.model.max_seq_len {
            return Err(CliError::Schema(format!(
                "analysis.window_len must lie in 2..={}",
                self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// First 16 hex digits of the SHA-256 of the compact JSON encoding.
pub fn hash_json<S: Serialize>(v: &S) -> String {
    let bytes = serde_json::to_vec(v).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Schema(format!("malformed override key {key:?}")));
    }
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just created")
            }
            _ => return Err(CliError::Schema(format!("override {key:?}: {} is not a section", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last part")
}
