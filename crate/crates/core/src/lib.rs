//! Music-to-dance building blocks: motion tokenization with finite scalar
//! quantization, a hybrid state-space/attention token generator, and
//! retrieval-based evaluation metrics.

pub mod error;
pub mod fsq;
pub mod io;
pub mod motion;
pub mod nn;
pub mod oracle;
mod real;
pub mod retrieval;
pub mod seqgen;

pub use error::{Error, ErrorKind, Result};
pub use real::Real;
