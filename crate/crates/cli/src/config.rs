//! Experiment configuration: one flat TOML file with every default
//! embedded, hashed into every artifact it produces.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use viscop_core::connector::ConnectorConfig;
use viscop_core::data::{DataConfig, DomainTransform};
use viscop_core::decoder::DecoderConfig;
use viscop_core::encoder::EncoderConfig;
use viscop_core::model::ModelConfig;
use viscop_core::probes::AttentionScope;
use viscop_core::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {err}")]
    Read { path: String, err: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

/// Environment variable overriding the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "VISCOP_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub count: usize,
    pub spatial_only: bool,
    pub residual: bool,
    pub per_head_scale: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            count: 16,
            spatial_only: false,
            residual: true,
            per_head_scale: true,
        }
    }
}

impl ProbeSettings {
    pub fn scope(&self) -> AttentionScope {
        if self.spatial_only {
            AttentionScope::SpatialOnly
        } else {
            AttentionScope::SpatioTemporal
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    /// Target-domain transform: "view-shift", "modality-shift", "task-shift".
    pub transform: DomainTransform,
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub decoder: DecoderConfig,
    pub probes: ProbeSettings,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: "runs".into(),
            transform: DomainTransform::ViewShift,
            encoder: EncoderConfig::default(),
            connector: ConnectorConfig::default(),
            decoder: DecoderConfig::default(),
            probes: ProbeSettings::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig {
                base_lr: 2e-3,
                ve_lr_scale: 1.0,
                epochs: 10,
                batch_size: 8,
                seed: 0,
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                base_lr: 1e-3,
                ve_lr_scale: 0.2,
                epochs: 3,
                batch_size: 8,
                seed: 0,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigFileError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigFileError::Read {
            path: path.display().to_string(),
            err: e.to_string(),
        })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigFileError::Parse(e.to_string()))?;
        // the experiment seed propagates into the training loops and data
        cfg.pretrain.seed = cfg.seed;
        cfg.adapt.seed = cfg.seed;
        cfg.data.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        let mut mc = self.model_config();
        // the vocabulary is generated with the dataset; size it here so the
        // decoder config can be checked
        mc.decoder.vocab_size = viscop_core::data::build_vocab(self.data.grid).len();
        mc.validate()
            .map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        if self.data.image_side() != self.encoder.image_side {
            return Err(ConfigFileError::Invalid(format!(
                "data renders {}px frames but the encoder expects {}px",
                self.data.image_side(),
                self.encoder.image_side
            )));
        }
        if self.data.frames > self.decoder.max_frames {
            return Err(ConfigFileError::Invalid(format!(
                "data uses {} frames but the decoder supports {}",
                self.data.frames, self.decoder.max_frames
            )));
        }
        if self.transform == DomainTransform::Identity {
            return Err(ConfigFileError::Invalid(
                "transform must name a target shift, not identity".into(),
            ));
        }
        Ok(())
    }

    /// The model architecture shared by pretraining and adaptation.
    /// `vocab_size` stays 0 until a vocabulary is attached.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::base(
            self.encoder.clone(),
            self.connector.clone(),
            self.decoder.clone(),
        )
    }

    pub fn dump_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the resolved config; stamped into every artifact.
    pub fn hash(&self) -> String {
        let canonical = self.dump_toml();
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output root: the env var wins over the config field.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var(OUTPUT_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.output_dir),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn dump_parses_back() {
        let cfg = ExperimentConfig::default();
        let text = cfg.dump_toml();
        let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_field_is_named_in_error() {
        let err = toml::from_str::<ExperimentConfig>("bogus_field = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_field"));
    }

    #[test]
    fn missing_nested_field_defaults_in() {
        let cfg: ExperimentConfig = toml::from_str("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.probes.count, 16);
    }
}
