//! Finite scalar quantization and the compositional token vocabulary.

mod codebook;
mod tokens;

pub use codebook::{
    canonical_latent, fsq_quantize, index_to_levels, index_to_values, levels_to_index, quantize_scalar, sigmoid,
    FsqCodebook,
};
pub use tokens::{
    cur, tokenize_clip, tokens_from_bundle, tokens_to_bundle, CompositionalCodebooks, NearestNeighborQuantizer,
    UsageHistogram, TOKENS_LOWER, TOKENS_UPPER,
};
