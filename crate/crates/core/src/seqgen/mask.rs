//! Causal and sliding-window attention masks.

use crate::error::{Error, Result};
use crate::Real;

/// Large negative stand-in for `-inf` in the additive mask form.
pub const MASK_FILL: f64 = -1e9;

/// Boolean allow-matrix `[queries, keys]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
}

/// First key visible from query `t`: 0 before the first full step, then
/// snapped forward to a stride boundary so the window width stays in
/// `(step - stride, step]`.
pub fn swa_window_start(t: usize, step: usize, stride: usize) -> usize {
    if t < step {
        0
    } else {
        stride * (t + 1 - step).div_ceil(stride)
    }
}

/// Sliding-window mask: `allow(t, k)` iff `start(t) <= k <= t`.
pub fn build_swa_mask(len: usize, step: usize, stride: usize) -> Result<AttentionMask> {
    if step == 0 || stride == 0 || stride > step {
        return Err(Error::Invalid(format!("window step {step} and stride {stride} need 1 <= stride <= step")));
    }
    Ok(AttentionMask::from_fn(len, len, |t, k| swa_window_start(t, step, stride) <= k && k <= t))
}

impl AttentionMask {
    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..queries).flat_map(|q| (0..keys).map(move |k| (q, k))).map(|(q, k)| f(q, k)).collect();
        Self { queries, keys, allow }
    }

    /// Full causal mask over `len` positions.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |q, k| k <= q)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.keys + k]
    }

    pub fn set(&mut self, q: usize, k: usize, allowed: bool) {
        self.allow[q * self.keys + k] = allowed;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.keys..(q + 1) * self.keys]
    }

    /// Number of allowed keys of query `q`.
    pub fn width(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&a| a).count()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.queries).all(|q| (q + 1..self.keys).all(|k| !self.allows(q, k)))
    }

    /// Additive form: 0 where allowed, [`MASK_FILL`] elsewhere.
    pub fn additive<T: Real>(&self) -> Vec<T> {
        self.allow.iter().map(|&a| if a { T::zero() } else { T::of(MASK_FILL) }).collect()
    }

    /// One line per query, `1` for allowed and `0` for masked keys.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.queries * (self.keys + 1));
        for q in 0..self.queries {
            s.extend(self.row(q).iter().map(|&a| if a { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed(mask: &AttentionMask, t: usize) -> Vec<usize> {
        (0..mask.keys()).filter(|&k| mask.allows(t, k)).collect()
    }

    #[test]
    fn documented_windows() {
        let m = build_swa_mask(128, 30, 15).unwrap();
        assert_eq!(allowed(&m, 10), (0..=10).collect::<Vec<_>>());
        assert_eq!(allowed(&m, 44), (15..=44).collect::<Vec<_>>());
        assert_eq!(allowed(&m, 45), (30..=45).collect::<Vec<_>>());
    }

    #[test]
    fn wide_step_is_causal() {
        assert_eq!(build_swa_mask(40, 64, 15).unwrap(), AttentionMask::causal(40));
    }

    #[test]
    fn invalid_parameters() {
        assert!(build_swa_mask(10, 0, 1).is_err());
        assert!(build_swa_mask(10, 5, 0).is_err());
        assert!(build_swa_mask(10, 5, 6).is_err());
    }

    #[test]
    fn grid_and_additive() {
        let m = AttentionMask::causal(3);
        assert_eq!(m.to_grid(), "100\n110\n111\n");
        let add: Vec<f64> = m.additive();
        assert_eq!(add[1], MASK_FILL);
        assert_eq!(add[3], 0.0);
    }
}
