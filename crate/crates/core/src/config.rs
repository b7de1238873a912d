//! Run configuration (one JSON document) and the reproducibility stamp.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::ModelConfig;
use crate::backbone::BackboneConfig;
use crate::checkpoint::CKPT_VERSION;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::frontend::FbankConfig;
use crate::training::{CorpusConfig, TrainConfig};

/// Every section is optional and falls back to its documented defaults;
/// unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frontend: FbankConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// A parsed configuration plus whether the document set `train.seed` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub train_seed_given: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<LoadedConfig> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let train_seed_given = raw.get("train").and_then(|t| t.get("seed")).is_some();
        let model = raw.get("model");
        let bare_strategy = model.is_some_and(|m| m.get("strategy").is_some() && m.get("fusion").is_none());
        let mut config: RunConfig = serde_json::from_value(raw)?;
        if bare_strategy {
            config.model.fusion = None;
        }
        config.validate()?;
        Ok(LoadedConfig {
            config,
            train_seed_given,
        })
    }

    /// Desk-scale preset used for the synthetic-corpus comparisons: a narrow
    /// one-block-per-stage backbone, 64-d embeddings, 48-frame crops, 300 steps.
    /// Still bmfa+afm; swap `model` strategy/fusion for the other systems.
    pub fn toy() -> Self {
        let mut c = RunConfig::default();
        c.model.backbone = BackboneConfig {
            base_channels: 8,
            blocks: [1, 1, 1, 1],
        };
        c.model.embedding_dim = 64;
        c.train.steps = 300;
        c.train.crop_min = 48;
        c.train.crop_max = 48;
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LoadedConfig> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact, field-ordered) JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex_digest(canonical.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Versions of the on-disk formats this build reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub tensor: u32,
    pub checkpoint: u32,
    pub metrics: u32,
}

pub const FORMAT_VERSIONS: FormatVersions = FormatVersions {
    tensor: 1,
    checkpoint: CKPT_VERSION,
    metrics: 1,
};

/// Written next to every command's outputs. Contains no timestamps, so
/// reruns produce identical stamps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub formats: FormatVersions,
    pub crate_version: String,
}

impl Stamp {
    pub fn new(command: &str, config: &RunConfig, seed: u64) -> Self {
        Stamp {
            command: command.to_string(),
            config_hash: config.hash(),
            seed,
            formats: FORMAT_VERSIONS,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).map_err(Error::Json)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.config, RunConfig::default());
        assert!(!c.train_seed_given);
        assert_eq!(c.config.train.margin, 0.15);
        assert_eq!(c.config.train.scale, 30.0);
        assert_eq!(c.config.eval.p_target, 0.01);
    }

    #[test]
    fn documented_field_names_parse() {
        let c = RunConfig::from_json(
            r#"{"model": {"strategy": "bmfa", "fusion": "afm", "r": 4, "embedding_dim": 512},
                "train": {"steps": 10, "batch": 8, "lr_start": 1e-3, "lr_end": 1e-4, "seed": 3, "m": 0.2, "s": 20},
                "eval": {"p_target": 0.05}}"#,
        )
        .unwrap();
        assert!(c.train_seed_given);
        assert_eq!(c.config.train.batch_size, 8);
        assert_eq!(c.config.train.margin, 0.2);
    }

    #[test]
    fn partial_model_sections() {
        let c = RunConfig::from_json(r#"{"model": {"embedding_dim": 64}}"#).unwrap().config;
        assert_eq!(c.model.strategy_id().unwrap().to_string(), "bmfa+afm");
        assert_eq!(c.model.embedding_dim, 64);
        let c = RunConfig::from_json(r#"{"model": {"strategy": "baseline"}}"#).unwrap().config;
        assert_eq!(c.model.fusion, None);
        assert!(RunConfig::from_json(r#"{"model": {"strategy": "bmfa"}}"#).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"stepz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"strategy": "bmfa", "fusion": "afm", "depth": 3}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let e = RunConfig::from_json(r#"{"corpus": {"n_speakers": 1}}"#).unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn toy_preset_validates_and_round_trips() {
        let toy = RunConfig::toy();
        toy.validate().unwrap();
        let back = RunConfig::from_json(&toy.to_json()).unwrap();
        assert_eq!(back.config, toy);
        assert!(back.train_seed_given);
    }
}
