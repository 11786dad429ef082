//! Cyclic Jacobi eigensolver for real symmetric matrices.

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 64;

/// Eigen-decomposition `A = Q diag(values) Qᵀ`, eigenvalues ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub n: usize,
    pub values: Vec<f64>,
    /// Row-major `n x n`; column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
    pub sweeps: usize,
}

impl SymmetricEigen {
    /// `Q f(Λ) Qᵀ` for a function applied to the eigenvalues.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n;
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut scaled = self.vectors.clone();
        for row in scaled.chunks_exact_mut(n) {
            row.iter_mut().zip(&fl).for_each(|(v, &l)| *v *= l);
        }
        let mut out = vec![0.0; n * n];
        f64_gemm_nt(n, &scaled, &self.vectors, &mut out);
        out
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        self.apply(|l| l)
    }
}

/// `c = a bᵀ` for square row-major matrices.
fn f64_gemm_nt(n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    use crate::Real;
    f64::gemm(n, n, n, 1.0, a, false, b, true, 0.0, c);
}

/// Decomposes a symmetric row-major `n x n` matrix. Rotations sweep the
/// upper triangle row by row until the off-diagonal mass falls below
/// `1e-15` of the Frobenius norm.
pub fn jacobi_eigen(a: &[f64], n: usize) -> Result<SymmetricEigen> {
    if a.len() != n * n {
        return Err(Error::shape("jacobi_eigen", format!("{} entries for {n} x {n}", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigensolver input is not finite".into()));
    }
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (a[i * n + j] - a[j * n + i]).abs())
        .fold(0.0, f64::max);
    if asym > 1e-8 * fro.max(1.0) {
        return Err(Error::Invalid(format!("eigensolver input is not symmetric (max asymmetry {asym:e})")));
    }
    let mut m = a.to_vec();
    let mut q = vec![0.0; n * n];
    (0..n).for_each(|i| q[i * n + i] = 1.0);
    let tol = 1e-15 * fro;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        let off = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum::<f64>();
        if off.sqrt() <= tol {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for r in p + 1..n {
                let apr = m[p * n + r];
                if apr == 0.0 {
                    continue;
                }
                let theta = (m[r * n + r] - m[p * n + p]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kr) = (m[k * n + p], m[k * n + r]);
                    m[k * n + p] = c * kp - s * kr;
                    m[k * n + r] = s * kp + c * kr;
                }
                for k in 0..n {
                    let (pk, rk) = (m[p * n + k], m[r * n + k]);
                    m[p * n + k] = c * pk - s * rk;
                    m[r * n + k] = s * pk + c * rk;
                }
                m[p * n + r] = 0.0;
                m[r * n + p] = 0.0;
                for k in 0..n {
                    let (kp, kr) = (q[k * n + p], q[k * n + r]);
                    q[k * n + p] = c * kp - s * kr;
                    q[k * n + r] = s * kp + c * kr;
                }
            }
        }
    }
    if sweeps == MAX_SWEEPS {
        return Err(Error::Numerical(format!("Jacobi iteration did not converge in {MAX_SWEEPS} sweeps")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = q[k * n + src];
        }
    }
    Ok(SymmetricEigen { n, values, vectors, sweeps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let e = jacobi_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14 && (e.values[1] - 3.0).abs() < 1e-14);
        let r = e.reconstruct();
        assert!(r.iter().zip([2.0, 1.0, 1.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn diagonal_input_needs_no_sweeps() {
        let e = jacobi_eigen(&[3.0, 0.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(e.sweeps, 0);
        assert_eq!(e.values, vec![-1.0, 3.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(jacobi_eigen(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
        assert!(jacobi_eigen(&[f64::NAN], 1).is_err());
        assert!(jacobi_eigen(&[1.0; 3], 2).is_err());
    }
}
