//! Run configuration shared by the library entry points and the CLI.

use serde::{Deserialize, Serialize};

use super::codec::CodecKind;
use crate::attention_control::AttentionControlConfig;
use crate::error::{Error, Result};
use crate::guidance::FusionOrder;
use crate::inversion::InversionHyperparams;
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationConfig {
    /// Guidance scale used by both streams and by the content inversion.
    pub w: f64,
    /// Number of denoising steps.
    pub steps: usize,
    pub fusion: FusionOrder,
    pub attention: AttentionControlConfig,
    pub hp: InversionHyperparams,
    pub seed: u64,
    pub codec: CodecKind,
    /// Scale of the `scaled_identity` codec.
    pub codec_scale: f64,
    pub exec: Exec,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        TranslationConfig {
            w: 4.0,
            steps: 50,
            fusion: FusionOrder::default(),
            attention: AttentionControlConfig::default(),
            hp: InversionHyperparams::default(),
            seed: 0,
            codec: CodecKind::Identity,
            codec_scale: 0.5,
            exec: Exec::default(),
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && self.w >= 1.0) {
            return Err(Error::Config(format!("w = {} must be finite and >= 1", self.w)));
        }
        if self.steps < 2 {
            return Err(Error::Config(format!("steps = {} must be at least 2", self.steps)));
        }
        self.attention.validate()?;
        self.hp.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TranslationConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Stable hash of every field, for keying cached stages.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
