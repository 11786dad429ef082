use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids per codebook half; the joint vocabulary is twice this.
pub const HALF_VOCAB: usize = 1000;
pub const VOCAB: usize = 2 * HALF_VOCAB;
/// Begin-of-sequence inputs, one per stream, never produced as outputs.
pub const BOS_UPPER: usize = VOCAB;
pub const BOS_LOWER: usize = VOCAB + 1;
/// Rows of the token embedding table: vocabulary plus the two begin ids.
pub const EMBED_ROWS: usize = VOCAB + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub ssm_state: usize,
    pub conv_kernel: usize,
    pub expand: usize,
    /// SWA autoregressive step S.
    pub swa_step: usize,
    /// SWA window stride R.
    pub swa_stride: usize,
    pub genres: usize,
    pub genre_dropout: f64,
    pub music_dim: usize,
    /// Token positions kept as context in long-sequence generation.
    pub context: usize,
}

impl HybridConfig {
    pub fn full() -> Self {
        Self {
            encoder_layers: 6,
            decoder_layers: 6,
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.25,
            ssm_state: 16,
            conv_kernel: 4,
            expand: 2,
            swa_step: 30,
            swa_stride: 15,
            genres: 16,
            genre_dropout: 0.3,
            music_dim: 1024,
            context: 45,
        }
    }

    /// Narrow two-layer stack for fast structural tests.
    pub fn small() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            model_dim: 32,
            heads: 4,
            ffn_dim: 64,
            ssm_state: 4,
            music_dim: 24,
            ..Self::full()
        }
    }

    /// Null-genre id, one past the last class.
    pub fn null_genre(&self) -> usize {
        self.genres
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.model_dim
    }

    /// Rank of the low-rank step-size projection, `ceil(model_dim / 16)`.
    pub fn dt_rank(&self) -> usize {
        self.model_dim.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.encoder_layers,
            self.decoder_layers,
            self.model_dim,
            self.heads,
            self.ffn_dim,
            self.ssm_state,
            self.conv_kernel,
            self.expand,
            self.music_dim,
            self.context,
        ];
        if positive.contains(&0) {
            return Err(Error::Invalid("hybrid config sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("model dim {} not divisible by {} heads", self.model_dim, self.heads)));
        }
        if self.swa_stride == 0 || self.swa_stride > self.swa_step {
            return Err(Error::Invalid(format!("SWA stride {} must be in 1..={}", self.swa_stride, self.swa_step)));
        }
        for p in [self.dropout, self.genre_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}
