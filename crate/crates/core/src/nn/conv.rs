//! Temporal convolutions, pooling and the motion-specific ops. Sequences are
//! time-major: row `t` holds all channels of step `t`.

use crate::error::{Error, Result};
use crate::fsq::{quantize_scalar, sigmoid};
use crate::motion::{fk_frame, fk_frame_backward, Skeleton};
use crate::Real;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Output length of a strided convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|span| span / stride + 1)
}

/// Output length of a strided transposed convolution.
pub fn conv_transpose1d_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((len.max(1) - 1) * stride + kernel).checked_sub(2 * pad)
}

/// `cols[t, ci * k + j] = x[t * stride + j - pad, ci]`, zero outside.
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<T> {
    let w = cin * kernel;
    let mut cols = vec![T::zero(); out_len * w];
    for t in 0..out_len {
        for j in 0..kernel {
            let Some(src) = (t * stride + j).checked_sub(pad).filter(|&s| s < len) else { continue };
            for ci in 0..cin {
                cols[t * w + ci * kernel + j] = x[src * cin + ci];
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    x: &mut [T],
) {
    let w = cin * kernel;
    for t in 0..out_len {
        for j in 0..kernel {
            let Some(src) = (t * stride + j).checked_sub(pad).filter(|&s| s < len) else { continue };
            for ci in 0..cin {
                x[src * cin + ci] += cols[t * w + ci * kernel + j];
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Strided 1-D convolution with zero padding, `[L, Cin] -> [L', Cout]`,
    /// weights `{name}.weight` `[Cout, Cin * K]` and `{name}.bias` `[Cout]`.
    pub fn conv1d(&mut self, x: Var, name: &str, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let label = self.label("conv1d");
        let (len, cin) = self.dims(x, "conv1d")?;
        let (cout, wk) = self.dims(w, "conv1d")?;
        if kernel == 0 || stride == 0 || wk != cin * kernel || self.value(b).len() != cout {
            return Err(Error::shape(&label, format!("input width {cin}, weight [{cout}, {wk}], kernel {kernel}")));
        }
        let out_len = conv1d_out_len(len, kernel, stride, pad)
            .ok_or_else(|| Error::shape(&label, format!("length {len} shorter than kernel {kernel}")))?;
        let cols = im2col(self.value(x).data(), cin, len, kernel, stride, pad, out_len);
        let mut y = vec![T::zero(); out_len * cout];
        T::gemm(out_len, wk, cout, T::one(), &cols, false, self.value(w).data(), true, T::zero(), &mut y);
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(cout) {
            row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
        }
        let out = Tensor::matrix(out_len, cout, y)?;
        Ok(self.push(
            "conv1d",
            out,
            Some(Box::new(move |g, vals, buf| {
                let wd = vals[w.index()].data();
                let mut gcols = vec![T::zero(); out_len * wk];
                T::gemm(out_len, cout, wk, T::one(), g, false, wd, false, T::zero(), &mut gcols);
                col2im(&gcols, cin, len, kernel, stride, pad, out_len, buf.acc(x, vals));
                T::gemm(cout, out_len, wk, T::one(), g, true, &cols, false, T::one(), buf.acc(w, vals));
                let gb = buf.acc(b, vals);
                for row in g.chunks_exact(cout) {
                    gb.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                }
            })),
        ))
    }

    /// Strided transposed convolution, `[L, Cin] -> [L', Cout]`, weights
    /// `{name}.weight` `[Cin, Cout * K]` and `{name}.bias` `[Cout]`.
    pub fn conv_transpose1d(&mut self, x: Var, name: &str, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let label = self.label("conv_transpose1d");
        let (len, cin) = self.dims(x, "conv_transpose1d")?;
        let (wi, wk) = self.dims(w, "conv_transpose1d")?;
        let cout = self.value(b).len();
        if kernel == 0 || stride == 0 || wi != cin || wk != cout * kernel {
            return Err(Error::shape(
                &label,
                format!("input width {cin}, weight [{wi}, {wk}], bias {cout}, kernel {kernel}"),
            ));
        }
        let out_len = conv_transpose1d_out_len(len, kernel, stride, pad)
            .filter(|&l| l > 0)
            .ok_or_else(|| Error::shape(&label, "padding exceeds output"))?;
        // cols[t, co * K + j] contributes to y[t * stride + j - pad, co]
        let mut cols = vec![T::zero(); len * wk];
        T::gemm(len, cin, wk, T::one(), self.value(x).data(), false, self.value(w).data(), false, T::zero(), &mut cols);
        let mut y = vec![T::zero(); out_len * cout];
        col2im(&cols, cout, out_len, kernel, stride, pad, len, &mut y);
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(cout) {
            row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
        }
        let out = Tensor::matrix(out_len, cout, y)?;
        Ok(self.push(
            "conv_transpose1d",
            out,
            Some(Box::new(move |g, vals, buf| {
                let gcols = im2col(g, cout, out_len, kernel, stride, pad, len);
                let (xd, wd) = (vals[x.index()].data(), vals[w.index()].data());
                T::gemm(len, wk, cin, T::one(), &gcols, false, wd, true, T::one(), buf.acc(x, vals));
                T::gemm(cin, len, wk, T::one(), xd, true, &gcols, false, T::one(), buf.acc(w, vals));
                let gb = buf.acc(b, vals);
                for row in g.chunks_exact(cout) {
                    gb.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                }
            })),
        ))
    }

    /// Averages consecutive row pairs; an odd last row passes through.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "avg_pool2")?;
        let out_len = m.div_ceil(2);
        let x = self.value(a).data();
        let half = T::of(0.5);
        let mut y = Vec::with_capacity(out_len * n);
        for t in 0..out_len {
            if 2 * t + 1 < m {
                y.extend((0..n).map(|j| (x[2 * t * n + j] + x[(2 * t + 1) * n + j]) * half));
            } else {
                y.extend_from_slice(&x[2 * t * n..(2 * t + 1) * n]);
            }
        }
        let out = Tensor::matrix(out_len, n, y)?;
        Ok(self.push(
            "avg_pool2",
            out,
            Some(Box::new(move |g, vals, buf| {
                let ga = buf.acc(a, vals);
                for t in 0..out_len {
                    let pair = 2 * t + 1 < m;
                    let w = if pair { half } else { T::one() };
                    for j in 0..n {
                        ga[2 * t * n + j] += g[t * n + j] * w;
                        if pair {
                            ga[(2 * t + 1) * n + j] += g[t * n + j] * w;
                        }
                    }
                }
            })),
        ))
    }

    /// Finite scalar quantization with a straight-through gradient: the
    /// forward value is the rounded level, the backward pass is that of the
    /// bounding sigmoid alone.
    pub fn fsq_ste(&mut self, z: Var, levels: &[u32]) -> Result<Var> {
        let (m, d) = self.dims(z, "fsq_ste")?;
        if d != levels.len() {
            return Err(Error::shape(
                &self.label("fsq_ste"),
                format!("latent width {d} for {} channels", levels.len()),
            ));
        }
        let zs = self.value(z).data();
        let u: Vec<T> = zs.iter().map(|&v| T::of(sigmoid(v.f64()))).collect();
        let offsets = match self.next_ste(m * d, "fsq_ste")? {
            Some(off) => off,
            None => zs
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!("non-finite latent {v}")));
                    }
                    Ok(T::of(quantize_scalar(v.f64(), levels[i % d]).1) - u[i])
                })
                .collect::<Result<Vec<T>>>()?,
        };
        let y: Vec<T> = u.iter().zip(&offsets).map(|(&a, &b)| a + b).collect();
        self.record_ste(offsets);
        let out = Tensor::matrix(m, d, y)?;
        Ok(self.push(
            "fsq_ste",
            out,
            Some(Box::new(move |g, vals, buf| {
                let gz: Vec<T> = g.iter().zip(&u).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                buf.add(z, vals, &gz);
            })),
        ))
    }

    /// Joint positions `[T, 3 * J]` from pose rows `[T, 3 + 6 * J]`.
    pub fn forward_kinematics(&mut self, pose: Var, skel: &Skeleton) -> Result<Var> {
        let (frames, width) = self.dims(pose, "forward_kinematics")?;
        let joints = skel.joint_count();
        if width != 3 + 6 * joints {
            return Err(Error::shape(
                &self.label("forward_kinematics"),
                format!("pose width {width} for {joints} joints"),
            ));
        }
        let x = self.value(pose).data();
        let mut fks = Vec::with_capacity(frames);
        let mut y = Vec::with_capacity(frames * 3 * joints);
        for t in 0..frames {
            let f = fk_frame(&x[t * width..(t + 1) * width], skel)?;
            y.extend(f.positions.iter().flatten().copied());
            fks.push(f);
        }
        let out = Tensor::matrix(frames, 3 * joints, y)?;
        let skel = skel.clone();
        Ok(self.push(
            "forward_kinematics",
            out,
            Some(Box::new(move |g, vals, buf| {
                let gp = buf.acc(pose, vals);
                for (t, f) in fks.iter().enumerate() {
                    let grad_pos: Vec<[T; 3]> =
                        g[t * 3 * joints..(t + 1) * 3 * joints].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                    fk_frame_backward(f, &skel, &grad_pos, &mut gp[t * width..(t + 1) * width]);
                }
            })),
        ))
    }
}
