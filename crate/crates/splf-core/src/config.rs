//! Run configuration: JSON in, validated struct out. Every field has a
//! default, unknown keys are rejected, and parse failures carry the line
//! and column so a typo in a 40-line config is findable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::PATCH;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Input images are square with this side length.
    pub image_size: usize,
    /// Channel width used throughout encoder and decoder.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    /// 1-based encoder layers whose outputs feed the decoder, shallow to
    /// deep. Exactly four.
    pub tap_indices: Vec<usize>,
    /// Maximum number of prompts retained; older entries are evicted first.
    pub bank_capacity: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub use_mafa: bool,
    pub use_fourier_filter: bool,
    pub use_prompts: bool,
    pub use_umfeb: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 64,
            embed_dim: 32,
            encoder_layers: 12,
            tap_indices: vec![2, 5, 8, 11],
            bank_capacity: 4,
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 50,
            seed: 42,
            use_mafa: true,
            use_fourier_filter: true,
            use_prompts: true,
            use_umfeb: true,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.embed_dim < 4 || self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be a multiple of 4 and at least 4, got {}",
                self.embed_dim
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be at least 1".to_string()));
        }
        if self.tap_indices.len() != 4 {
            return Err(Error::Config(format!(
                "tap_indices must list exactly 4 layers, got {}",
                self.tap_indices.len()
            )));
        }
        for pair in self.tap_indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(format!(
                    "tap_indices must be strictly increasing, got {:?}",
                    self.tap_indices
                )));
            }
        }
        if self.tap_indices[0] == 0 || self.tap_indices[3] > self.encoder_layers {
            return Err(Error::Config(format!(
                "tap_indices must lie in 1..={}, got {:?}",
                self.encoder_layers, self.tap_indices
            )));
        }
        if self.bank_capacity == 0 {
            return Err(Error::Config("bank_capacity must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        debug_assert_eq!(self.map_size() % PATCH, 0, "guaranteed by the image_size check");
        Ok(())
    }

    /// Side length of the encoder feature maps (stride-4 patch embedding).
    pub fn map_size(&self) -> usize {
        self.image_size / 4
    }

    /// Replaces the seed when the override (normally the SPLF_SEED
    /// environment variable) is present.
    pub fn apply_seed_override(&mut self, raw: Option<&str>) -> Result<()> {
        if let Some(text) = raw {
            self.seed = text
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("SPLF_SEED must be an unsigned integer, got {text:?}")))?;
        }
        Ok(())
    }
}
