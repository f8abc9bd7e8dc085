//! Experiment and matrix configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slu_core::am::decode::DecodeConfig;
use slu_core::am::units::UnitKind;
use slu_core::am::EncoderConfig;
use slu_core::frontend::{FeatureConfig, PerturbationPolicy};
use slu_core::joint::JointTrainConfig;
use slu_core::s2i::MultiTaskConfig;
use slu_core::t2i::{intent_finetune_defaults, MlmConfig, TextConfig};
use slu_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Cascade,
    E2e,
    E2eJoint,
    E2eTts,
    E2eJointTts,
}

impl Pipeline {
    pub fn uses_text(self) -> bool {
        matches!(self, Pipeline::Cascade | Pipeline::E2eJoint | Pipeline::E2eJointTts)
    }

    pub fn uses_tts(self) -> bool {
        matches!(self, Pipeline::E2eTts | Pipeline::E2eJointTts)
    }

    pub fn uses_joint(self) -> bool {
        matches!(self, Pipeline::E2eJoint | Pipeline::E2eJointTts)
    }
}

/// A manifest, the fraction of it to use, and an optional seed that
/// replaces the experiment seed for this stage (subset draw and training).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub manifest: PathBuf,
    #[serde(default = "full")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn full() -> f64 {
    1.0
}

impl DataSpec {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            fraction: 1.0,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub am_pretrain: Option<DataSpec>,
    /// Use a stored acoustic model instead of pretraining one.
    pub am_checkpoint: Option<PathBuf>,
    pub am_adapt: Option<DataSpec>,
    pub lm: Option<DataSpec>,
    pub t2i: Option<DataSpec>,
    pub s2i: Option<DataSpec>,
    /// Paired data for joint training; defaults to the S2I data.
    pub joint: Option<DataSpec>,
    pub tts_source: Option<DataSpec>,
    pub dev: Option<DataSpec>,
    pub test: Option<DataSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub units: UnitKind,
    pub encoder: EncoderConfig,
    pub embedding_dim: Option<usize>,
    pub text: TextConfig,
    pub lm_order: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            units: UnitKind::Grapheme,
            encoder: EncoderConfig::default(),
            embedding_dim: None,
            text: TextConfig::default(),
            lm_order: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtsConfig {
    pub backend: crate::tts::TtsBackend,
    pub speakers: usize,
    /// Applies speed/tempo perturbation to the merged real + synthetic set.
    pub perturb: bool,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            backend: crate::tts::TtsBackend::default(),
            speakers: 10,
            perturb: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub am: TrainConfig,
    pub adapt: TrainConfig,
    pub perturbation: PerturbationPolicy,
    pub s2i: MultiTaskConfig,
    pub mlm: MlmConfig,
    pub t2i: TrainConfig,
    pub joint: JointTrainConfig,
    pub tts: TtsConfig,
    pub decode: DecodeConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            am: TrainConfig::default(),
            adapt: TrainConfig::default(),
            perturbation: PerturbationPolicy::default(),
            s2i: MultiTaskConfig::default(),
            mlm: MlmConfig::default(),
            t2i: intent_finetune_defaults(),
            joint: JointTrainConfig::default(),
            tts: TtsConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub pipeline: Pipeline,
    #[serde(default = "one")]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainingConfig,
}

fn one() -> u64 {
    1
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("experiment `{name}`: {message}")]
    Invalid { name: String, message: String },
}

impl ExperimentConfig {
    /// Check that the pipeline has every data assignment it needs and that
    /// referenced manifests exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |message: &str| ConfigError::Invalid {
            name: self.name.clone(),
            message: message.to_string(),
        };
        let d = &self.data;
        if d.am_pretrain.is_none() && d.am_checkpoint.is_none() {
            return Err(bad("needs data.am_pretrain or data.am_checkpoint"));
        }
        if d.test.is_none() {
            return Err(bad("needs data.test"));
        }
        if self.pipeline.uses_text() && d.t2i.is_none() {
            return Err(bad("pipeline needs data.t2i"));
        }
        if self.pipeline == Pipeline::Cascade && d.lm.is_none() {
            return Err(bad("cascade needs data.lm"));
        }
        if self.pipeline != Pipeline::Cascade && d.s2i.is_none() {
            return Err(bad("pipeline needs data.s2i"));
        }
        if self.pipeline.uses_tts() && d.tts_source.is_none() {
            return Err(bad("pipeline needs data.tts_source"));
        }
        for spec in [&d.am_pretrain, &d.am_adapt, &d.lm, &d.t2i, &d.s2i, &d.joint, &d.tts_source, &d.dev, &d.test]
            .into_iter()
            .flatten()
        {
            if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
                return Err(bad(&format!("fraction {} outside (0, 1]", spec.fraction)));
            }
            if !spec.manifest.exists() {
                return Err(bad(&format!("manifest {} does not exist", spec.manifest.display())));
            }
        }
        if let Some(p) = &d.am_checkpoint {
            if !p.exists() {
                return Err(bad(&format!("checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Make relative manifest paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for spec in [
            &mut d.am_pretrain,
            &mut d.am_adapt,
            &mut d.lm,
            &mut d.t2i,
            &mut d.s2i,
            &mut d.joint,
            &mut d.tts_source,
            &mut d.dev,
            &mut d.test,
        ]
        .into_iter()
        .flatten()
        {
            if spec.manifest.is_relative() {
                spec.manifest = base.join(&spec.manifest);
            }
        }
        if let Some(p) = &mut d.am_checkpoint {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Rows whose means anchor the recovery column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverySpec {
    pub low: String,
    pub full: String,
}

/// A list of experiments, each run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub seeds: Vec<u64>,
    pub recovery: Option<RecoverySpec>,
    pub experiments: Vec<ExperimentConfig>,
}

/// Recursive table merge; `over` wins.
fn merge(base: &toml::Value, over: &toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            let mut out = b.clone();
            for (k, v) in o {
                let merged = match b.get(k) {
                    Some(bv) => merge(bv, v),
                    None => v.clone(),
                };
                out.insert(k.clone(), merged);
            }
            toml::Value::Table(out)
        }
        (_, o) => o.clone(),
    }
}

fn parse_err(path: &Path, message: impl ToString) -> ConfigError {
    ConfigError::Parse {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(path, e))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| parse_err(path, e))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

/// Matrix file: `seeds`, optional `[recovery]`, a `[defaults]` table merged
/// under every `[[experiment]]`.
pub fn parse_matrix(text: &str, base: &Path, origin: &Path) -> Result<MatrixConfig, ConfigError> {
    let root: toml::Value = toml::from_str(text).map_err(|e| parse_err(origin, e))?;
    let defaults = root.get("defaults").cloned().unwrap_or(toml::Value::Table(Default::default()));
    let seeds = match root.get("seeds") {
        Some(v) => v.clone().try_into().map_err(|e| parse_err(origin, e))?,
        None => vec![1],
    };
    let recovery = match root.get("recovery") {
        Some(v) => Some(v.clone().try_into().map_err(|e| parse_err(origin, e))?),
        None => None,
    };
    let mut experiments = Vec::new();
    for e in root.get("experiment").and_then(|v| v.as_array()).cloned().unwrap_or_default() {
        let mut cfg: ExperimentConfig = merge(&defaults, &e).try_into().map_err(|e| parse_err(origin, e))?;
        cfg.resolve_paths(base);
        experiments.push(cfg);
    }
    if experiments.is_empty() {
        return Err(parse_err(origin, "no [[experiment]] entries"));
    }
    Ok(MatrixConfig { seeds, recovery, experiments })
}

pub fn load_matrix(path: &Path) -> Result<MatrixConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(path, e))?;
    parse_matrix(&text, path.parent().unwrap_or(Path::new(".")), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MATRIX: &str = r#"
seeds = [1, 2]

[recovery]
low = "low"
full = "full"

[defaults]
pipeline = "e2e"
[defaults.data]
am_pretrain = { manifest = "pre.jsonl", seed = 7 }
test = { manifest = "test.jsonl" }
[defaults.model.encoder]
layers = 2
[defaults.train.s2i.train]
epochs = 3

[[experiment]]
name = "low"
data.s2i = { manifest = "train.jsonl", fraction = 0.1 }

[[experiment]]
name = "full"
data.s2i = { manifest = "train.jsonl" }
model.encoder.hidden_per_direction = 32
"#;

    #[test]
    fn matrix_defaults_merge_under_experiments() {
        let m = parse_matrix(MATRIX, Path::new("/data"), Path::new("m.toml")).unwrap();
        assert_eq!(m.seeds, vec![1, 2]);
        assert_eq!(m.recovery.unwrap().low, "low");
        let low = &m.experiments[0];
        assert_eq!(low.pipeline, Pipeline::E2e);
        assert_eq!(low.data.s2i.as_ref().unwrap().fraction, 0.1);
        assert_eq!(low.data.s2i.as_ref().unwrap().manifest, Path::new("/data/train.jsonl"));
        assert_eq!(low.data.am_pretrain.as_ref().unwrap().seed, Some(7));
        assert_eq!(low.model.encoder.layers, 2);
        assert_eq!(low.model.encoder.hidden_per_direction, 128);
        assert_eq!(low.train.s2i.train.epochs, 3);
        assert_eq!(low.train.s2i.train.batch_size, 16);
        assert_eq!(m.experiments[1].model.encoder.hidden_per_direction, 32);
    }

    #[test]
    fn unknown_keys_and_missing_data_are_rejected() {
        let bad = MATRIX.replace("fraction = 0.1", "fraktion = 0.1");
        assert!(parse_matrix(&bad, Path::new("/"), Path::new("m.toml")).is_err());
        let m = parse_matrix(MATRIX, Path::new("/nonexistent"), Path::new("m.toml")).unwrap();
        assert!(matches!(m.experiments[0].validate(), Err(ConfigError::Invalid { .. })));
        let mut e = m.experiments[0].clone();
        e.pipeline = Pipeline::E2eJoint;
        let msg = e.validate().unwrap_err().to_string();
        assert!(msg.contains("data.t2i"), "{msg}");
    }
}
