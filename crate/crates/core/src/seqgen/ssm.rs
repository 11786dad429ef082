//! Zero-order-hold discretization and the linear state-space scan
//! `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t h_t`, with `h_0 = 0`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Real;

/// Steps per block of the blocked scan. Fixed so results do not depend on
/// the thread count.
pub const SCAN_BLOCK: usize = 16;

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("step size must be positive, got {delta}")))
    }
}

/// `(exp(Δa) - 1) / a`, which tends to `Δ` as `a -> 0`.
#[inline]
pub fn zoh_gain<T: Real>(a: T, delta: T) -> T {
    if a == T::zero() {
        delta
    } else {
        (a * delta).exp_m1() / a
    }
}

/// Diagonal discretization. `a` is the `n` diagonal of A and `b` is B
/// row-major `[n, d_in]`. Returns `(Ā [n], B̄ [n, d_in])`.
pub fn discretize_diag(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_delta(delta)?;
    let n = a.len();
    if n == 0 || !b.len().is_multiple_of(n) {
        return Err(Error::shape("discretize", format!("A has {n} states, B has {} entries", b.len())));
    }
    let d_in = b.len() / n;
    let abar = a.iter().map(|&ai| (delta * ai).exp()).collect();
    let bbar = b.iter().enumerate().map(|(idx, &bij)| zoh_gain(a[idx / d_in], delta) * bij).collect();
    Ok((abar, bbar))
}

/// General-matrix discretization: `Ā = exp(ΔA)`,
/// `B̄ = (ΔA)^-1 (exp(ΔA) - I) ΔB`. Requires `ΔA` invertible.
pub fn discretize_general(a: &DMatrix<f64>, b: &DMatrix<f64>, delta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_delta(delta)?;
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::shape("discretize", format!("A {}x{}, B {}x{}", n, a.ncols(), b.nrows(), b.ncols())));
    }
    let da = a * delta;
    let abar = da.exp();
    let rhs = (&abar - DMatrix::identity(n, n)) * (b * delta);
    let bbar = da.lu().solve(&rhs).ok_or_else(|| Error::Numerical("ΔA is singular".into()))?;
    Ok((abar, bbar))
}

/// Time-varying diagonal state-space system over `steps` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// Diagonal of A, `[n]`.
    pub a: Vec<T>,
    /// Per-step input maps `[steps, n, d_in]`.
    pub b: Vec<T>,
    /// Per-step output maps `[steps, d_out, n]`.
    pub c: Vec<T>,
    /// Per-step step sizes `[steps]`.
    pub delta: Vec<T>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Real> SsmParams<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, c: Vec<T>, delta: Vec<T>, d_in: usize, d_out: usize) -> Result<Self> {
        let (n, steps) = (a.len(), delta.len());
        if n == 0 || b.len() != steps * n * d_in || c.len() != steps * d_out * n {
            return Err(Error::shape(
                "SsmParams",
                format!("n={n}, steps={steps}, d_in={d_in}, d_out={d_out}: B has {}, C has {}", b.len(), c.len()),
            ));
        }
        for &d in &delta {
            check_delta(d.f64())?;
        }
        Ok(Self { a, b, c, delta, d_in, d_out })
    }

    pub fn state(&self) -> usize {
        self.a.len()
    }

    pub fn steps(&self) -> usize {
        self.delta.len()
    }

    /// Ā_t and the driven input B̄_t x_t of one step.
    fn drive(&self, t: usize, x: &[T], abar: &mut [T], u: &mut [T]) {
        let (n, d_in) = (self.state(), self.d_in);
        let dt = self.delta[t];
        let b = &self.b[t * n * d_in..(t + 1) * n * d_in];
        for i in 0..n {
            abar[i] = (dt * self.a[i]).exp();
            let gain = zoh_gain(self.a[i], dt);
            u[i] = gain * b[i * d_in..(i + 1) * d_in].iter().zip(x).map(|(&bv, &xv)| bv * xv).sum::<T>();
        }
    }
}

/// Runs the recurrence over `x` `[steps, d_in]` and returns `y` `[steps, d_out]`.
///
/// Blocks of [`SCAN_BLOCK`] steps are scanned independently from a zero
/// state while tracking the running product of Ā; the block carries are then
/// chained sequentially and folded back into each step.
pub fn ssm_scan<T: Real>(p: &SsmParams<T>, x: &[T]) -> Result<Vec<T>> {
    let (n, steps) = (p.state(), p.steps());
    if x.len() != steps * p.d_in {
        return Err(Error::shape("ssm_scan", format!("input has {} values for {steps} x {}", x.len(), p.d_in)));
    }
    // Per step: local state from the block start, and the decay since the block start.
    let mut local = vec![T::zero(); steps * n];
    let mut decay = vec![T::zero(); steps * n];
    local.par_chunks_mut(SCAN_BLOCK * n).zip(decay.par_chunks_mut(SCAN_BLOCK * n)).enumerate().for_each(
        |(blk, (loc, dec))| {
            let mut abar = vec![T::zero(); n];
            let mut u = vec![T::zero(); n];
            let mut h = vec![T::zero(); n];
            let mut prod = vec![T::one(); n];
            for (s, (lrow, drow)) in loc.chunks_exact_mut(n).zip(dec.chunks_exact_mut(n)).enumerate() {
                let t = blk * SCAN_BLOCK + s;
                p.drive(t, &x[t * p.d_in..(t + 1) * p.d_in], &mut abar, &mut u);
                for i in 0..n {
                    h[i] = abar[i] * h[i] + u[i];
                    prod[i] *= abar[i];
                }
                lrow.copy_from_slice(&h);
                drow.copy_from_slice(&prod);
            }
        },
    );
    // State entering each block.
    let blocks = steps.div_ceil(SCAN_BLOCK);
    let mut carry = vec![T::zero(); blocks * n];
    for blk in 1..blocks {
        let last = blk * SCAN_BLOCK - 1;
        for i in 0..n {
            carry[blk * n + i] = local[last * n + i] + decay[last * n + i] * carry[(blk - 1) * n + i];
        }
    }
    let mut y = vec![T::zero(); steps * p.d_out];
    y.par_chunks_mut(p.d_out).enumerate().for_each(|(t, yrow)| {
        let blk = t / SCAN_BLOCK;
        let c = &p.c[t * p.d_out * n..(t + 1) * p.d_out * n];
        for (o, yv) in yrow.iter_mut().enumerate() {
            *yv = (0..n).map(|i| c[o * n + i] * (local[t * n + i] + decay[t * n + i] * carry[blk * n + i])).sum();
        }
    });
    Ok(y)
}

/// Selective scan over `channels` independent single-input systems sharing
/// per-step `B_t`, `C_t` `[steps, n]`: channel `c` has diagonal `a[c]`
/// `[channels, n]`, step sizes `delta[t, c]` and input `x[t, c]`. `h`
/// `[channels, n]` is the carried state, updated in place, so the same call
/// serves whole sequences and single decoding steps. Returns `y` `[steps, channels]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Real>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    channels: usize,
    n: usize,
    h: &mut [T],
) -> Result<Vec<T>> {
    let steps = if channels == 0 { 0 } else { x.len() / channels };
    if x.len() != steps * channels
        || delta.len() != x.len()
        || a.len() != channels * n
        || b.len() != steps * n
        || c.len() != steps * n
        || h.len() != channels * n
    {
        return Err(Error::shape("selective_scan", format!("{channels} channels, state {n}, {} inputs", x.len())));
    }
    let mut y = vec![T::zero(); steps * channels];
    for t in 0..steps {
        let (bt, ct) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n]);
        for ch in 0..channels {
            let (dt, xv) = (delta[t * channels + ch], x[t * channels + ch]);
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for i in 0..n {
                let ai = a[ch * n + i];
                hs[i] = (dt * ai).exp() * hs[i] + zoh_gain(ai, dt) * bt[i] * xv;
                acc += ct[i] * hs[i];
            }
            y[t * channels + ch] = acc;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let (abar, bbar) = discretize_diag(&[-1.0], &[1.0], 2f64.ln()).unwrap();
        assert!((abar[0] - 0.5).abs() < 1e-12);
        assert!((bbar[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn small_a_limit() {
        let (_, bbar) = discretize_diag(&[1e-12], &[3.0], 0.1).unwrap();
        assert!((bbar[0] - 0.3).abs() < 1e-12);
        let (_, bbar) = discretize_diag(&[0.0], &[3.0], 0.1).unwrap();
        assert!((bbar[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(discretize_diag(&[-1.0], &[1.0], 0.0).is_err());
        assert!(discretize_diag(&[-1.0], &[1.0], -1.0).is_err());
        assert!(discretize_general(&DMatrix::identity(2, 2), &DMatrix::zeros(2, 1), 0.0).is_err());
    }

    #[test]
    fn general_path_agrees_with_diagonal() {
        let a = [-1.0, -0.25, 0.5];
        let b = [1.0, 2.0, -1.0, 0.5, 3.0, 0.0];
        let (abar, bbar) = discretize_diag(&a, &b, 0.3).unwrap();
        let (ga, gb) = discretize_general(
            &DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&a)),
            &DMatrix::from_row_slice(3, 2, &b),
            0.3,
        )
        .unwrap();
        for i in 0..3 {
            assert!((ga[(i, i)] - abar[i]).abs() < 1e-12);
            for j in 0..2 {
                assert!((gb[(i, j)] - bbar[i * 2 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_and_memoryless() {
        // T=1: y = C B̄ x.
        let p = SsmParams::new(vec![-1.0], vec![2.0], vec![3.0], vec![2f64.ln()], 1, 1).unwrap();
        let y = ssm_scan(&p, &[5.0]).unwrap();
        assert!((y[0] - 3.0 * 0.5 * 2.0 * 5.0).abs() < 1e-12);
        // Ā -> 0 as a -> -inf: every step only sees its own input.
        let steps = 40;
        let p = SsmParams::new(vec![-1e6], vec![1e6; steps], vec![1.0; steps], vec![1.0; steps], 1, 1).unwrap();
        let x: Vec<f64> = (0..steps).map(|t| t as f64).collect();
        let y = ssm_scan(&p, &x).unwrap();
        for t in 0..steps {
            assert!((y[t] - x[t]).abs() < 1e-9, "{t}");
        }
    }

    #[test]
    fn shape_errors() {
        assert!(SsmParams::new(vec![-1.0], vec![1.0; 2], vec![1.0], vec![1.0], 1, 1).is_err());
        let p = SsmParams::new(vec![-1.0], vec![1.0], vec![1.0], vec![1.0], 1, 1).unwrap();
        assert!(ssm_scan(&p, &[1.0, 2.0]).is_err());
    }
}
