use serde::{Deserialize, Serialize};

use crate::error::{DcaError, Result};

/// Architecture hyperparameters and the structural ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of the first two stem convolutions; the third emits `d_model`.
    pub stem_channels: [usize; 2],
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    /// Number of shared decoder blocks (L).
    pub decoder_layers: usize,
    /// Number of location queries (N).
    pub num_queries: usize,
    /// Width of the semantic vectors.
    pub d_se: usize,
    /// Weight of the linear head in the duplex fusion.
    pub beta: f64,
    pub temperature_init: f64,
    /// Separate localization and recognition decoding passes.
    pub decoupled: bool,
    /// Semantic vectors join the recognition decoder as extra queries.
    pub semantic_queries: bool,
    /// Linear head fused with the semantic-similarity head.
    pub duplex: bool,
    /// Stop gradients from recognition into the localization pass.
    pub detach_local: bool,
    /// Heads on every intermediate decoder block.
    pub aux_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: [16, 32],
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 6,
            num_queries: 100,
            d_se: 32,
            beta: 0.5,
            temperature_init: 10.0,
            decoupled: true,
            semantic_queries: true,
            duplex: true,
            detach_local: false,
            aux_loss: false,
        }
    }
}

impl ModelConfig {
    /// Reduced depth and query count for single-core runs.
    pub fn desk() -> Self {
        Self { decoder_layers: 3, num_queries: 25, ..Self::default() }
    }

    /// Stem stride; three stride-2 convolutions.
    pub const STRIDE: usize = 8;

    pub fn token_grid(&self) -> usize {
        self.image_size / Self::STRIDE
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid() * self.token_grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DcaError::Config(m));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        if self.num_queries == 0 || self.decoder_layers == 0 {
            return bad("num_queries and decoder_layers must be at least 1".into());
        }
        if self.image_size < Self::STRIDE || self.image_size % Self::STRIDE != 0 {
            return bad(format!("image size {} must be a positive multiple of {}", self.image_size, Self::STRIDE));
        }
        if self.d_se == 0 || self.ffn_dim == 0 || self.stem_channels.contains(&0) {
            return bad("widths must be positive".into());
        }
        if !(self.temperature_init.is_finite() && self.temperature_init > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature_init));
        }
        Ok(())
    }
}
