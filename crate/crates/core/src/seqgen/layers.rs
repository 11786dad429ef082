//! Inference-only building blocks over row-major `[rows, cols]` buffers.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::Real;

use super::attention::multi_head_attention;
use super::config::HybridConfig;
use super::mask::AttentionMask;
use super::ssm::selective_scan;

const LN_EPS: f64 = 1e-5;

/// `x W^T + b` with `{name}.weight` `[out, in]` and `{name}.bias` `[out]`.
pub(crate) fn linear<T: Real>(p: &ParamStore<T>, name: &str, x: &[T]) -> Result<Vec<T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let (out, inp) = w.dims2().ok_or_else(|| Error::shape(name, "weight must be a matrix"))?;
    if !x.len().is_multiple_of(inp) {
        return Err(Error::shape(name, format!("{} inputs for width {inp}", x.len())));
    }
    let rows = x.len() / inp;
    let mut y = vec![T::zero(); rows * out];
    T::gemm(rows, inp, out, T::one(), x, false, w.data(), true, T::zero(), &mut y);
    let b = p.get(&format!("{name}.bias"))?.data();
    for row in y.chunks_exact_mut(out) {
        row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
    }
    Ok(y)
}

pub(crate) fn layer_norm<T: Real>(p: &ParamStore<T>, name: &str, x: &[T]) -> Result<Vec<T>> {
    let gamma = p.get(&format!("{name}.weight"))?.data();
    let beta = p.get(&format!("{name}.bias"))?.data();
    let n = gamma.len();
    if n == 0 || !x.len().is_multiple_of(n) {
        return Err(Error::shape(name, format!("{} inputs for width {n}", x.len())));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::one() / (var + T::of(LN_EPS)).sqrt();
        y.extend(row.iter().zip(gamma).zip(beta).map(|((&v, &g), &b)| (v - mean) * is * g + b));
    }
    Ok(y)
}

pub(crate) fn relu<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

pub(crate) fn silu<T: Real>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    if v > T::of(20.0) {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn add_in_place<T: Real>(x: &mut [T], y: &[T]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a += b);
}

/// Two-layer ReLU feed-forward, `{name}.fc0` then `{name}.fc1`.
pub(crate) fn feed_forward<T: Real>(p: &ParamStore<T>, name: &str, x: &[T]) -> Result<Vec<T>> {
    let mut h = linear(p, &format!("{name}.fc0"), x)?;
    relu(&mut h);
    linear(p, &format!("{name}.fc1"), &h)
}

/// Registers the parameters of [`mamba_block`] under `name`.
pub(crate) fn init_mamba<T: Real>(p: &mut ParamStore<T>, name: &str, cfg: &HybridConfig) -> Result<()> {
    let (d, di, n, k, r) = (cfg.model_dim, cfg.inner_dim(), cfg.ssm_state, cfg.conv_kernel, cfg.dt_rank());
    p.layer_norm(&format!("{name}.norm"), d)?;
    p.linear(&format!("{name}.in_proj"), d, 2 * di)?;
    p.uniform(&format!("{name}.conv.weight"), &[di, k], k)?;
    p.uniform(&format!("{name}.conv.bias"), &[di], k)?;
    p.linear(&format!("{name}.x_proj"), di, r + 2 * n)?;
    p.linear(&format!("{name}.dt_proj"), r, di)?;
    // Step sizes start log-spaced over [1e-3, 1e-1] through the inverse softplus.
    let bias = p.get_mut(&format!("{name}.dt_proj.bias"))?;
    let len = bias.len();
    for (c, v) in bias.data_mut().iter_mut().enumerate() {
        let frac = if len > 1 { c as f64 / (len - 1) as f64 } else { 0.5 };
        let dt = (1e-3f64.ln() + frac * (1e-1f64.ln() - 1e-3f64.ln())).exp();
        *v = T::of(dt + (-(-dt).exp_m1()).ln());
    }
    let a_log: Vec<T> = (0..di).flat_map(|_| (1..=n).map(|i| T::of((i as f64).ln()))).collect();
    p.insert(&format!("{name}.a_log"), crate::nn::Tensor::new(vec![di, n], a_log)?)?;
    p.constant(&format!("{name}.d"), &[di], 1.0)?;
    p.linear(&format!("{name}.out_proj"), di, d)
}

/// Carried state of a mamba block: the last `kernel - 1` conv inputs and
/// the scan state.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaState<T> {
    conv: Vec<T>,
    ssm: Vec<T>,
}

impl<T: Real> MambaState<T> {
    pub fn new(cfg: &HybridConfig) -> Self {
        Self {
            conv: vec![T::zero(); (cfg.conv_kernel - 1) * cfg.inner_dim()],
            ssm: vec![T::zero(); cfg.inner_dim() * cfg.ssm_state],
        }
    }
}

/// Selective SSM branch without norm or residual: expand, causal depthwise
/// conv, SiLU, input-dependent Δ/B/C, scan, SiLU gate, contract. Rows are
/// consumed in order starting from `state`, which is left at the last row.
pub fn mamba_mixer<T: Real>(
    p: &ParamStore<T>,
    name: &str,
    cfg: &HybridConfig,
    u: &[T],
    state: &mut MambaState<T>,
) -> Result<Vec<T>> {
    let (di, n, k, r) = (cfg.inner_dim(), cfg.ssm_state, cfg.conv_kernel, cfg.dt_rank());
    let xz = linear(p, &format!("{name}.in_proj"), u)?;
    let rows = xz.len() / (2 * di);
    let w = p.get(&format!("{name}.conv.weight"))?.data();
    let cb = p.get(&format!("{name}.conv.bias"))?.data();
    // History rows followed by the new inputs.
    let mut hist = state.conv.clone();
    for row in xz.chunks_exact(2 * di) {
        hist.extend_from_slice(&row[..di]);
    }
    let mut x = vec![T::zero(); rows * di];
    for t in 0..rows {
        for c in 0..di {
            let acc = (0..k).map(|j| w[c * k + j] * hist[(t + j) * di + c]).sum::<T>() + cb[c];
            x[t * di + c] = silu(acc);
        }
    }
    state.conv.copy_from_slice(&hist[rows * di..]);
    let dbc = linear(p, &format!("{name}.x_proj"), &x)?;
    let width = r + 2 * n;
    let mut low = Vec::with_capacity(rows * r);
    let mut bmat = Vec::with_capacity(rows * n);
    let mut cmat = Vec::with_capacity(rows * n);
    for row in dbc.chunks_exact(width) {
        low.extend_from_slice(&row[..r]);
        bmat.extend_from_slice(&row[r..r + n]);
        cmat.extend_from_slice(&row[r + n..]);
    }
    let mut delta = linear(p, &format!("{name}.dt_proj"), &low)?;
    delta.iter_mut().for_each(|v| *v = softplus(*v));
    let a: Vec<T> = p.get(&format!("{name}.a_log"))?.data().iter().map(|&v| -v.exp()).collect();
    let mut y = selective_scan(&x, &delta, &a, &bmat, &cmat, di, n, &mut state.ssm)?;
    let dskip = p.get(&format!("{name}.d"))?.data();
    for t in 0..rows {
        for c in 0..di {
            let z = xz[t * 2 * di + di + c];
            let v = &mut y[t * di + c];
            *v = (*v + dskip[c] * x[t * di + c]) * silu(z);
        }
    }
    linear(p, &format!("{name}.out_proj"), &y)
}

/// Pre-norm mamba block with residual, `x + mixer(norm(x))`.
pub fn mamba_block<T: Real>(
    p: &ParamStore<T>,
    name: &str,
    cfg: &HybridConfig,
    x: &[T],
    state: &mut MambaState<T>,
) -> Result<Vec<T>> {
    let h = layer_norm(p, &format!("{name}.norm"), x)?;
    let mut out = mamba_mixer(p, name, cfg, &h, state)?;
    add_in_place(&mut out, x);
    Ok(out)
}

pub(crate) fn init_attention<T: Real>(p: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    p.layer_norm(&format!("{name}.norm"), d)?;
    for proj in ["q", "k", "v", "o"] {
        p.linear(&format!("{name}.{proj}"), d, d)?;
    }
    Ok(())
}

/// Keys and values of `{name}` for the given context rows.
pub(crate) fn project_kv<T: Real>(p: &ParamStore<T>, name: &str, ctx: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    Ok((linear(p, &format!("{name}.k"), ctx)?, linear(p, &format!("{name}.v"), ctx)?))
}

/// Attention sub-layer output (before the residual) for normalized query
/// rows `h` against precomputed keys and values.
pub(crate) fn attend<T: Real>(
    p: &ParamStore<T>,
    name: &str,
    heads: usize,
    h: &[T],
    keys: &[T],
    values: &[T],
    mask: &AttentionMask,
) -> Result<Vec<T>> {
    let q = linear(p, &format!("{name}.q"), h)?;
    let d = p.get(&format!("{name}.q.bias"))?.len();
    let o = multi_head_attention(&q, keys, values, d, heads, mask)?;
    linear(p, &format!("{name}.o"), &o)
}

pub(crate) fn init_ffn<T: Real>(p: &mut ParamStore<T>, name: &str, d: usize, hidden: usize) -> Result<()> {
    p.layer_norm(&format!("{name}.norm"), d)?;
    p.linear(&format!("{name}.fc0"), d, hidden)?;
    p.linear(&format!("{name}.fc1"), hidden, d)
}

/// Pre-norm feed-forward with residual.
pub(crate) fn ffn_block<T: Real>(p: &ParamStore<T>, name: &str, x: &mut [T]) -> Result<()> {
    let h = layer_norm(p, &format!("{name}.norm"), x)?;
    let y = feed_forward(p, name, &h)?;
    add_in_place(x, &y);
    Ok(())
}
