//! Tensor bundles, seeded randomness and synthetic corpora.

mod bundle;
mod rng;
mod synth;

pub use bundle::{read_bundle, write_bundle, DType, Entry, TensorBundle, MAGIC, VERSION};
pub use rng::SeededRng;
pub use synth::{
    gen_synthetic_motion, gen_synthetic_music, sliding_windows, SyntheticCorpusSpec, ROT_AMPLITUDE_MAX, ROT_OMEGA_MAX,
    TOKEN_DOWNSAMPLE,
};
