//! Masked scaled dot-product attention, `softmax((QKᵀ + M) / √C) V`.
//!
//! Masked keys get weight exactly zero: their scores are never formed, which
//! is the `M = -inf` limit of the additive form.

use crate::error::{Error, Result};
use crate::Real;

use super::mask::AttentionMask;

/// Softmax weights of one query row over its allowed keys, written into
/// `weights` (zero where masked). `q` is the query's `c` values; key `j`
/// occupies `keys[j * stride + offset..][..c]`.
fn row_weights<T: Real>(q: &[T], keys: &[T], stride: usize, offset: usize, allow: &[bool], weights: &mut [T]) -> bool {
    let c = q.len();
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut max = T::neg_infinity();
    for (j, w) in weights.iter_mut().enumerate() {
        if allow[j] {
            let kr = &keys[j * stride + offset..j * stride + offset + c];
            let s = q.iter().zip(kr).map(|(&a, &b)| a * b).sum::<T>() * scale;
            *w = s;
            max = max.max(s);
        } else {
            *w = T::zero();
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for (j, w) in weights.iter_mut().enumerate() {
        if allow[j] {
            *w = (*w - max).exp();
            sum += *w;
        }
    }
    weights.iter_mut().for_each(|w| *w /= sum);
    true
}

fn check_mask(mask: &AttentionMask, tq: usize, tk: usize) -> Result<()> {
    if mask.queries() != tq || mask.keys() != tk {
        return Err(Error::shape(
            "attention",
            format!("mask {}x{} for {tq} queries and {tk} keys", mask.queries(), mask.keys()),
        ));
    }
    Ok(())
}

/// Single-head attention over `q` `[tq, c]`, `k`/`v` `[tk, c]`. Returns the
/// output `[tq, c]` and the post-softmax weights `[tq, tk]`.
pub fn attention<T: Real>(q: &[T], k: &[T], v: &[T], c: usize, mask: &AttentionMask) -> Result<(Vec<T>, Vec<T>)> {
    if c == 0 || !q.len().is_multiple_of(c) || !k.len().is_multiple_of(c) || k.len() != v.len() {
        return Err(Error::shape(
            "attention",
            format!("q {}, k {}, v {} values for head width {c}", q.len(), k.len(), v.len()),
        ));
    }
    let (tq, tk) = (q.len() / c, k.len() / c);
    check_mask(mask, tq, tk)?;
    let mut out = vec![T::zero(); tq * c];
    let mut weights = vec![T::zero(); tq * tk];
    for i in 0..tq {
        let w = &mut weights[i * tk..(i + 1) * tk];
        if !row_weights(&q[i * c..(i + 1) * c], k, c, 0, mask.row(i), w) {
            return Err(Error::Numerical(format!("attention row {i} is fully masked")));
        }
        for (j, &wj) in w.iter().enumerate() {
            if wj != T::zero() {
                out[i * c..(i + 1) * c].iter_mut().zip(&v[j * c..(j + 1) * c]).for_each(|(o, &vv)| *o += wj * vv);
            }
        }
    }
    Ok((out, weights))
}

/// Multi-head attention over row-major `[tq, d]` queries and `[tk, d]`
/// keys/values; head `h` uses columns `h * d / heads..`. Returns `[tq, d]`.
pub fn multi_head_attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Vec<T>> {
    if heads == 0
        || !d.is_multiple_of(heads)
        || !q.len().is_multiple_of(d)
        || !k.len().is_multiple_of(d)
        || k.len() != v.len()
    {
        return Err(Error::shape(
            "attention",
            format!("width {d} with {heads} heads; q {}, k {}, v {}", q.len(), k.len(), v.len()),
        ));
    }
    let (tq, tk, c) = (q.len() / d, k.len() / d, d / heads);
    check_mask(mask, tq, tk)?;
    let mut out = vec![T::zero(); tq * d];
    let mut w = vec![T::zero(); tk];
    for i in 0..tq {
        for h in 0..heads {
            let off = h * c;
            if !row_weights(&q[i * d + off..i * d + off + c], k, d, off, mask.row(i), &mut w) {
                return Err(Error::Numerical(format!("attention row {i} is fully masked")));
            }
            let o = &mut out[i * d + off..i * d + off + c];
            for (j, &wj) in w.iter().enumerate() {
                if wj != T::zero() {
                    o.iter_mut().zip(&v[j * d + off..j * d + off + c]).for_each(|(a, &vv)| *a += wj * vv);
                }
            }
        }
    }
    Ok(out)
}
