use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type shared by the tensor kernels: `f32` for
/// training and inference, `f64` for gradient checks and oracles.
pub trait Real:
    Float + Debug + Display + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
    /// `a` is `m x k` and `b` is `k x n` after the optional transposes.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

// Rows of C per parallel task. Fixed so results do not depend on the pool size.
const GEMM_ROW_BLOCK: usize = 64;
const GEMM_PAR_THRESHOLD: usize = 1 << 21;

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs size");
                assert_eq!(b.len(), k * n, "gemm: rhs size");
                assert_eq!(c.len(), m * n, "gemm: output size");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                let run = |row0: usize, rows: usize, c_blk: &mut [Self]| {
                    let a_off = if trans_a { row0 } else { row0 * k };
                    // SAFETY: the strides above describe in-bounds views of `a`, `b` and
                    // `c_blk`; sizes were asserted on entry.
                    unsafe {
                        $kernel(
                            rows,
                            k,
                            n,
                            alpha,
                            a.as_ptr().add(a_off),
                            rsa,
                            csa,
                            b.as_ptr(),
                            rsb,
                            csb,
                            beta,
                            c_blk.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                };
                if m * k * n >= GEMM_PAR_THRESHOLD && m > GEMM_ROW_BLOCK && rayon::current_num_threads() > 1 {
                    use rayon::prelude::*;
                    c.par_chunks_mut(GEMM_ROW_BLOCK * n).enumerate().for_each(|(i, blk)| {
                        run(i * GEMM_ROW_BLOCK, blk.len() / n, blk);
                    });
                } else {
                    run(0, m, c);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
