//! Slow reference implementations used to check the optimized paths.

use crate::error::Result;
use crate::io::SeededRng;
use crate::seqgen::{HybridModel, SsmParams, TokenPair, BOS_LOWER, BOS_UPPER, VOCAB};
use crate::Real;

/// Step-by-step recurrence in f64 straight from the definition.
pub fn naive_ssm_scan<T: Real>(p: &SsmParams<T>, x: &[T]) -> Vec<f64> {
    let (n, d_in, d_out) = (p.state(), p.d_in, p.d_out);
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(p.steps() * d_out);
    for t in 0..p.steps() {
        let dt = p.delta[t].f64();
        for i in 0..n {
            let a = p.a[i].f64();
            let abar = (dt * a).exp();
            let gain = if a == 0.0 { dt } else { (abar - 1.0) / a };
            let bx: f64 = (0..d_in).map(|j| p.b[(t * n + i) * d_in + j].f64() * x[t * d_in + j].f64()).sum();
            h[i] = abar * h[i] + gain * bx;
        }
        for o in 0..d_out {
            y.push((0..n).map(|i| p.c[(t * d_out + o) * n + i].f64() * h[i]).sum());
        }
    }
    y
}

/// Argmax generation for `T' <= context` that re-runs the whole decoder over
/// the full prefix for every token, with no carried state.
pub fn generate_recompute<T: Real>(model: &HybridModel<T>, music: &[T], genre: Option<usize>) -> Result<TokenPair> {
    let frames = music.len() / model.cfg.music_dim;
    let enc = model.encode_music(music)?;
    let g = model.encode_genre(genre, false, &mut SeededRng::new(0))?;
    let mut upper = vec![BOS_UPPER];
    let mut lower = vec![BOS_LOWER];
    for t in 0..frames {
        let logits = model.decode_logits(&upper, &lower, &enc, &g)?;
        let row = &logits[t * VOCAB..(t + 1) * VOCAB];
        let (u, l) = split_argmax(row);
        upper.push(u);
        lower.push(l);
    }
    Ok(TokenPair { upper: upper[1..].to_vec(), lower: lower[1..].to_vec() })
}

fn split_argmax<T: Real>(row: &[T]) -> (usize, usize) {
    let best = |r: &[T]| (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b });
    (best(&row[..VOCAB / 2]), VOCAB / 2 + best(&row[VOCAB / 2..]))
}
