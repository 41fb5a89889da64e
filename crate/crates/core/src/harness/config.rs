use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::harness::data::SyntheticDatasetSpec;
use crate::losses::LossWeights;
use crate::model::{AdamConfig, ForwardConfig, ModelSpec, ScheduleConfig};
use crate::sinkhorn::SinkhornConfig;

/// Widths of the learned layers; token counts and vocabulary come from the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelWidths {
    pub channels: usize,
    pub hidden: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        ModelWidths {
            channels: 8,
            hidden: 16,
        }
    }
}

/// One training/evaluation experiment. Loaded from TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub fusion: FusionMode,
    pub renormalize_rows: bool,
    pub batch_size: usize,
    /// Epochs between held-out evaluations and intermediate checkpoints; 0 disables them.
    pub eval_every: usize,
    pub dataset: SyntheticDatasetSpec,
    pub model: ModelWidths,
    pub sinkhorn: SinkhornConfig,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            fusion: FusionMode::Ot,
            renormalize_rows: false,
            batch_size: 16,
            eval_every: 0,
            dataset: SyntheticDatasetSpec::default(),
            model: ModelWidths::default(),
            sinkhorn: SinkhornConfig::default(),
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Argument(msg) => Error::Config(msg),
            other => other,
        };
        self.dataset.validate()?;
        self.sinkhorn.validate().map_err(wrap)?;
        self.weights.validate().map_err(wrap)?;
        self.schedule.validate().map_err(wrap)?;
        self.adam.validate().map_err(wrap)?;
        self.model_spec().validate().map_err(wrap)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            audio_dim: self.dataset.audio_dim,
            visual_dim: self.dataset.visual_dim,
            channels: self.model.channels,
            hidden: self.model.hidden,
            vocab_size: self.dataset.vocab_size,
            audio_tokens: self.dataset.n_latent_tokens,
            visual_tokens: self.dataset.n_latent_tokens,
            caption_len: self.dataset.caption_len,
        }
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            weights: self.weights,
            fusion: self.fusion,
            renormalize_rows: self.renormalize_rows,
            sinkhorn: self.sinkhorn,
        }
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 4\n[sinkhorn]\nepsilon = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.sinkhorn.epsilon, 0.5);
        assert_eq!(cfg.sinkhorn.max_iters, SinkhornConfig::default().max_iters);
        assert_eq!(cfg.dataset, SyntheticDatasetSpec::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::default().to_toml_string();
        text = text.replacen("batch_size", "bogus_key = 1\nbatch_size", 1);
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");

        let nested = ExperimentConfig::default()
            .to_toml_string()
            .replacen("[sinkhorn]", "[sinkhorn]\ngamma = 2", 1);
        assert!(ExperimentConfig::from_toml_str(&nested).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.sinkhorn.epsilon = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let text = ExperimentConfig::default().to_toml_string().replace("fusion = \"ot\"", "fusion = \"qformer\"");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }
}
