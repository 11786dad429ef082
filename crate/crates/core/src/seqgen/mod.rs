//! Hybrid state-space/attention token generator.

mod attention;
mod config;
mod layers;
mod loss;
mod mask;
mod model;
mod ssm;

pub use attention::{attention, multi_head_attention};
pub use config::{HybridConfig, BOS_LOWER, BOS_UPPER, EMBED_ROWS, HALF_VOCAB, VOCAB};
pub use layers::{mamba_block, mamba_mixer, MambaState};
pub use loss::next_token_loss;
pub use mask::{build_swa_mask, swa_window_start, AttentionMask, MASK_FILL};
pub use model::{argmax, DecoderCache, HybridModel, Sampling, TokenPair};
pub use ssm::{discretize_diag, discretize_general, selective_scan, ssm_scan, zoh_gain, SsmParams, SCAN_BLOCK};
