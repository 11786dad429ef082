use crate::error::{Error, Result};
use crate::Real;

use super::config::{HALF_VOCAB, VOCAB};

fn restricted_ce(row: &[f64], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Next-token cross-entropy. Logit row `t` (rows `0..T'-1` of a `[T', 2000]`
/// or `[T'-1, 2000]` buffer) is scored against the targets at `t + 1`: the
/// upper id under a softmax over logits `[0, 1000)`, the lower id under a
/// softmax over `[1000, 2000)`. Returns the mean of the two losses, averaged
/// over positions.
pub fn next_token_loss<T: Real>(logits: &[T], upper: &[usize], lower: &[usize]) -> Result<f64> {
    let len = upper.len();
    if len < 2 {
        return Err(Error::InsufficientFrames { need: 2, got: len });
    }
    if lower.len() != len {
        return Err(Error::shape("next_token_loss", format!("{len} upper vs {} lower targets", lower.len())));
    }
    if logits.len() != len * VOCAB && logits.len() != (len - 1) * VOCAB {
        return Err(Error::shape("next_token_loss", format!("{} logits for {len} positions", logits.len())));
    }
    if let Some(&u) = upper.iter().find(|&&u| u >= HALF_VOCAB) {
        return Err(Error::OutOfRange(format!("upper target {u}")));
    }
    if let Some(&l) = lower.iter().find(|&&l| !(HALF_VOCAB..VOCAB).contains(&l)) {
        return Err(Error::OutOfRange(format!("lower target {l}")));
    }
    let mut total = 0.0;
    for t in 0..len - 1 {
        let row: Vec<f64> = logits[t * VOCAB..(t + 1) * VOCAB].iter().map(|v| v.f64()).collect();
        let up = restricted_ce(&row[..HALF_VOCAB], upper[t + 1]);
        let lo = restricted_ce(&row[HALF_VOCAB..], lower[t + 1] - HALF_VOCAB);
        total += 0.5 * (up + lo);
    }
    Ok(total / (len - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_1000() {
        let logits = vec![0.0f64; 3 * VOCAB];
        let loss = next_token_loss(&logits, &[1, 2, 3], &[1001, 1002, 1003]).unwrap();
        assert!((loss - 1000f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn delta_logits_cost_nothing() {
        let (up, lo) = ([5, 7, 9], [1500, 1200, 1999]);
        let mut logits = vec![0.0f64; 2 * VOCAB];
        for t in 0..2 {
            logits[t * VOCAB + up[t + 1]] = 50.0;
            logits[t * VOCAB + lo[t + 1]] = 50.0;
        }
        assert!(next_token_loss(&logits, &up, &lo).unwrap() < 1e-18);
    }

    #[test]
    fn targets_are_shifted() {
        // Logits point at the token of the same position; a shifted loss must see the mismatch.
        let (up, lo) = ([1, 2, 3], [1001, 1002, 1003]);
        let mut logits = vec![0.0f64; 3 * VOCAB];
        for t in 0..3 {
            logits[t * VOCAB + up[t]] = 50.0;
            logits[t * VOCAB + lo[t]] = 50.0;
        }
        let aligned = next_token_loss(&logits, &up, &lo).unwrap();
        assert!(aligned > 40.0, "{aligned}");
    }

    #[test]
    fn errors() {
        assert!(next_token_loss(&[0.0f64; VOCAB], &[1], &[1001]).is_err());
        assert!(next_token_loss(&[0.0f64; 2 * VOCAB], &[1000, 1], &[1001, 1001]).is_err());
        assert!(next_token_loss(&[0.0f64; 2 * VOCAB], &[1, 1], &[1, 1001]).is_err());
    }
}
