//! Define-by-run reverse-mode tape.
//!
//! Every op evaluates eagerly, validates its input shapes and records a
//! closure that maps the output gradient onto its inputs. `backward` replays
//! the closures in reverse creation order, which is a valid topological
//! order because a node can only consume earlier nodes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::SeededRng;
use crate::Real;

use super::params::ParamStore;
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient accumulators indexed by node.
pub struct GradBuf<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradBuf<T> {
    /// Accumulator of `v`, zero-filled on first use.
    pub fn acc(&mut self, v: Var, vals: &[Tensor<T>]) -> &mut [T] {
        let len = vals[v.0].len();
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn add(&mut self, v: Var, vals: &[Tensor<T>], g: &[T]) {
        for (a, &b) in self.acc(v, vals).iter_mut().zip(g) {
            *a += b;
        }
    }
}

pub(crate) type BackFn<T> = Box<dyn Fn(&[T], &[Tensor<T>], &mut GradBuf<T>)>;

struct Node<T> {
    op: &'static str,
    back: Option<BackFn<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    params: BTreeMap<String, Tensor<T>>,
    vars: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Gradient of the loss with respect to any node, if it was reached.
    pub fn var(&self, v: Var) -> Option<&[T]> {
        self.vars.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sums `other` into `self`, parameter by parameter. Node gradients are
    /// dropped since node handles are graph-local.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        self.vars.clear();
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(mine) => mine.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                None => {
                    self.params.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        let c = T::of(c);
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn empty() -> Self {
        Self { params: BTreeMap::new(), vars: Vec::new() }
    }
}

/// Straight-through offsets `q(u) - u` of every fsq node, in creation order.
pub type SteOffsets<T> = Vec<Vec<T>>;

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    param_vars: BTreeMap<String, Var>,
    train: bool,
    rng: SeededRng,
    ste_recorded: SteOffsets<T>,
    ste_replay: Option<SteOffsets<T>>,
}

pub(crate) fn dims_of<T: Real>(t: &Tensor<T>, node: &str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::shape(node, format!("expected rank <= 2, got shape {:?}", t.shape())))
}

impl<'p, T: Real> Graph<'p, T> {
    /// Inference-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            values: Vec::new(),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            train: false,
            rng: SeededRng::new(0),
            ste_recorded: Vec::new(),
            ste_replay: None,
        }
    }

    /// Training-mode graph with seeded dropout masks.
    pub fn training(params: &'p ParamStore<T>, seed: u64) -> Self {
        let mut g = Self::new(params);
        g.train = true;
        g.rng = SeededRng::new(seed);
        g
    }

    /// Replays previously recorded straight-through offsets so that
    /// perturbed re-evaluations see the same piecewise-linear surrogate.
    pub fn with_ste_offsets(mut self, offsets: SteOffsets<T>) -> Self {
        self.ste_replay = Some(offsets);
        self
    }

    pub fn ste_offsets(&self) -> &SteOffsets<T> {
        &self.ste_recorded
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn push(&mut self, op: &'static str, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { op, back });
        Var(self.values.len() - 1)
    }

    /// Node label used in error messages, e.g. `conv1d#12`.
    pub(crate) fn label(&self, op: &str) -> String {
        format!("{op}#{}", self.values.len())
    }

    pub(crate) fn dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        dims_of(&self.values[v.0], &self.label(op))
    }

    pub(crate) fn next_ste(&self, len: usize, op: &str) -> Result<Option<Vec<T>>> {
        let index = self.ste_recorded.len();
        match &self.ste_replay {
            None => Ok(None),
            Some(all) => {
                let off = all.get(index).ok_or_else(|| Error::shape(&self.label(op), "no recorded offsets"))?;
                if off.len() != len {
                    return Err(Error::shape(&self.label(op), "recorded offsets have a different size"));
                }
                Ok(Some(off.clone()))
            }
        }
    }

    pub(crate) fn record_ste(&mut self, offsets: Vec<T>) {
        self.ste_recorded.push(offsets);
    }

    /// Leaf holding a constant. Its gradient is still reported by `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push("input", t, None)
    }

    /// Leaf bound to a named parameter; repeated calls share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.push("param", t, None);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = &self.values[loss.0];
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.item().is_finite() {
            return Err(Error::Numerical(format!("loss is {}", lt.item())));
        }
        let mut buf = GradBuf { slots: vec![None; self.values.len()] };
        buf.slots[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(back) = &self.nodes[i].back else { continue };
            let Some(g) = buf.slots[i].take() else { continue };
            back(&g, &self.values, &mut buf);
            buf.slots[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(name, v)| {
                let g = buf.slots[v.0].clone().unwrap_or_else(|| vec![T::zero(); self.values[v.0].len()]);
                (name.clone(), Tensor::new(self.values[v.0].shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { params, vars: buf.slots })
    }

    /// Op name of a node, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                &self.label(op),
                format!("{:?} vs {:?}", self.values[a.0].shape(), self.values[b.0].shape()),
            ));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            "add",
            out,
            Some(Box::new(move |g, vals, buf| {
                buf.add(a, vals, g);
                buf.add(b, vals, g);
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            "sub",
            out,
            Some(Box::new(move |g, vals, buf| {
                buf.add(a, vals, g);
                for (d, &gv) in buf.acc(b, vals).iter_mut().zip(g) {
                    *d -= gv;
                }
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            "mul",
            out,
            Some(Box::new(move |g, vals, buf| {
                let (xa, xb) = (vals[a.0].data(), vals[b.0].data());
                let ga: Vec<T> = g.iter().zip(xb).map(|(&gv, &q)| gv * q).collect();
                let gb: Vec<T> = g.iter().zip(xa).map(|(&gv, &p)| gv * p).collect();
                buf.add(a, vals, &ga);
                buf.add(b, vals, &gb);
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let x = &self.values[a.0];
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect()).unwrap();
        self.push(
            "scale",
            out,
            Some(Box::new(move |g, vals, buf| {
                for (d, &gv) in buf.acc(a, vals).iter_mut().zip(g) {
                    *d += gv * c;
                }
            })),
        )
    }

    /// Broadcasts a length-`n` vector over every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_row")?;
        if self.values[b.0].len() != n {
            return Err(Error::shape(
                &self.label("add_row"),
                format!("row vector of {} for width {n}", self.values[b.0].len()),
            ));
        }
        let (x, r) = (&self.values[a.0], self.values[b.0].data());
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(r).for_each(|(v, &bv)| *v += bv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            "add_row",
            out,
            Some(Box::new(move |g, vals, buf| {
                buf.add(a, vals, g);
                let gb = buf.acc(b, vals);
                for row in g.chunks_exact(n).take(m) {
                    gb.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                }
            })),
        ))
    }

    /// Multiplies every row of an `m x n` matrix by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "mul_row")?;
        if self.values[b.0].len() != n {
            return Err(Error::shape(
                &self.label("mul_row"),
                format!("row vector of {} for width {n}", self.values[b.0].len()),
            ));
        }
        let (x, r) = (&self.values[a.0], self.values[b.0].data());
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(r).for_each(|(v, &bv)| *v *= bv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            "mul_row",
            out,
            Some(Box::new(move |g, vals, buf| {
                let (xa, xb) = (vals[a.0].data(), vals[b.0].data());
                let ga: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * xb[i % n]).collect();
                buf.add(a, vals, &ga);
                let gb = buf.acc(b, vals);
                for r in 0..m {
                    for j in 0..n {
                        gb[j] += g[r * n + j] * xa[r * n + j];
                    }
                }
            })),
        ))
    }

    /// Elementwise map with derivative expressed through input and output.
    fn unary(&mut self, a: Var, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let x = &self.values[a.0];
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap();
        let me = Var(self.values.len());
        self.push(
            op,
            out,
            Some(Box::new(move |g, vals, buf| {
                let (xs, ys) = (vals[a.0].data(), vals[me.0].data());
                let gx: Vec<T> = g.iter().zip(xs.iter().zip(ys)).map(|(&gv, (&x, &y))| gv * df(x, y)).collect();
                buf.add(a, vals, &gx);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, "sigmoid", sigmoid_t, |_, y| y * (T::one() - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, "relu", |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", |x| x.exp(), |_, y| y)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, "softplus", softplus_t, |x, _| sigmoid_t(x))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            "silu",
            |x| x * sigmoid_t(x),
            |x, _| {
                let s = sigmoid_t(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    // ---- shape ops ----

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "transpose")?;
        let x = self.values[a.0].data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        Ok(self.push(
            "transpose",
            out,
            Some(Box::new(move |g, vals, buf| {
                let ga = buf.acc(a, vals);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            })),
        ))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, n) = self.dims(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape(&self.label("slice_cols"), format!("columns {start}..{end} of {n}")));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.gather_cols_named(a, &idx, "slice_cols")
    }

    /// `out[:, j] = a[:, idx[j]]`; indices may repeat.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.gather_cols_named(a, idx, "gather_cols")
    }

    fn gather_cols_named(&mut self, a: Var, idx: &[usize], op: &'static str) -> Result<Var> {
        let (m, n) = self.dims(a, op)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(&self.label(op), format!("column {bad} of {n}")));
        }
        let x = self.values[a.0].data();
        let w = idx.len();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend(idx.iter().map(|&c| x[r * n + c]));
        }
        let out = Tensor::matrix(m, w, data)?;
        let idx = idx.to_vec();
        Ok(self.push(
            op,
            out,
            Some(Box::new(move |g, vals, buf| {
                let ga = buf.acc(a, vals);
                for r in 0..m {
                    for (j, &c) in idx.iter().enumerate() {
                        ga[r * n + c] += g[r * w + j];
                    }
                }
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut widths = Vec::with_capacity(parts.len());
        let mut rows = None;
        for &p in parts {
            let (m, n) = self.dims(p, "concat_cols")?;
            if *rows.get_or_insert(m) != m {
                return Err(Error::shape(&self.label("concat_cols"), "row counts differ"));
            }
            widths.push(n);
        }
        let m = rows.ok_or_else(|| Error::shape(&self.label("concat_cols"), "no inputs"))?;
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        let parts = parts.to_vec();
        Ok(self.push(
            "concat_cols",
            out,
            Some(Box::new(move |g, vals, buf| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let gp = buf.acc(p, vals);
                    for r in 0..m {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            })),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        for &p in parts {
            let (m, n) = self.dims(p, "concat_rows")?;
            if *cols.get_or_insert(n) != n {
                return Err(Error::shape(&self.label("concat_rows"), "column counts differ"));
            }
            rows += m;
        }
        let n = cols.ok_or_else(|| Error::shape(&self.label("concat_rows"), "no inputs"))?;
        let data: Vec<T> = parts.iter().flat_map(|p| self.values[p.0].data().iter().copied()).collect();
        let out = Tensor::matrix(rows, n, data)?;
        let parts = parts.to_vec();
        Ok(self.push(
            "concat_rows",
            out,
            Some(Box::new(move |g, vals, buf| {
                let mut off = 0;
                for &p in &parts {
                    let len = vals[p.0].len();
                    buf.add(p, vals, &g[off..off + len]);
                    off += len;
                }
            })),
        ))
    }

    /// Row `t` becomes `a[t + 1] - a[t]`.
    pub fn time_diff(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "time_diff")?;
        if m < 2 {
            return Err(Error::InsufficientFrames { need: 2, got: m });
        }
        let x = self.values[a.0].data();
        let data: Vec<T> = x[n..].iter().zip(&x[..(m - 1) * n]).map(|(&p, &q)| p - q).collect();
        let out = Tensor::matrix(m - 1, n, data)?;
        Ok(self.push(
            "time_diff",
            out,
            Some(Box::new(move |g, vals, buf| {
                let ga = buf.acc(a, vals);
                for (i, &gv) in g.iter().enumerate() {
                    ga[i + n] += gv;
                    ga[i] -= gv;
                }
            })),
        ))
    }

    // ---- dense ----

    /// `a @ b`, or `a @ b^T` with `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (br, bc) = self.dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(&self.label("matmul"), format!("[{m}, {k}] @ [{kb}, {n}]")));
        }
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            trans_b,
            T::zero(),
            &mut data,
        );
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(
            "matmul",
            out,
            Some(Box::new(move |g, vals, buf| {
                let (xa, xb) = (vals[a.0].data(), vals[b.0].data());
                T::gemm(m, n, k, T::one(), g, false, xb, !trans_b, T::one(), buf.acc(a, vals));
                if trans_b {
                    T::gemm(n, m, k, T::one(), g, true, xa, false, T::one(), buf.acc(b, vals));
                } else {
                    T::gemm(k, m, n, T::one(), xa, true, g, false, T::one(), buf.acc(b, vals));
                }
            })),
        ))
    }

    /// `x @ W^T + b` with `W` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let y = self.matmul(x, w, true)?;
        self.add_row(y, b)
    }

    /// Affine layer normalization over each row.
    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.weight"))?;
        let beta = self.param(&format!("{name}.bias"))?;
        self.layer_norm_with(x, gamma, beta, 1e-5)
    }

    pub fn layer_norm_with(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.values[gamma.0].len() != n || self.values[beta.0].len() != n {
            return Err(Error::shape(&self.label("layer_norm"), format!("affine params must have width {n}")));
        }
        let (xs, gs, bs) = (self.values[x.0].data(), self.values[gamma.0].data(), self.values[beta.0].data());
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        let nf = T::of(n as f64);
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gs[j] + bs[j];
            }
        }
        let out = Tensor::new(self.values[x.0].shape().to_vec(), out)?;
        Ok(self.push(
            "layer_norm",
            out,
            Some(Box::new(move |g, vals, buf| {
                let gs = vals[gamma.0].data();
                let mut gx = vec![T::zero(); m * n];
                let mut gg = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                for r in 0..m {
                    let (gr, hr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                    let mut mean_gh = T::zero();
                    let mut mean_ghh = T::zero();
                    for j in 0..n {
                        let gh = gr[j] * gs[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    mean_gh /= nf;
                    mean_ghh /= nf;
                    for j in 0..n {
                        gx[r * n + j] = inv_std[r] * (gr[j] * gs[j] - mean_gh - hr[j] * mean_ghh);
                    }
                }
                buf.add(x, vals, &gx);
                buf.add(gamma, vals, &gg);
                buf.add(beta, vals, &gb);
            })),
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "softmax")?;
        let mut data = self.values[a.0].data().to_vec();
        for row in data.chunks_exact_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let me = Var(self.values.len());
        Ok(self.push(
            "softmax",
            out,
            Some(Box::new(move |g, vals, buf| {
                let y = vals[me.0].data();
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                buf.add(a, vals, &gx);
            })),
        ))
    }

    /// Adds a large negative constant where `allow` is false.
    pub fn add_mask(&mut self, a: Var, allow: &[bool]) -> Result<Var> {
        if allow.len() != self.values[a.0].len() {
            return Err(Error::shape(&self.label("add_mask"), "mask size differs from input"));
        }
        let neg = T::of(MASK_NEG);
        let x = &self.values[a.0];
        let data = x.data().iter().zip(allow).map(|(&v, &ok)| if ok { v } else { v + neg }).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push("add_mask", out, Some(Box::new(move |g, vals, buf| buf.add(a, vals, g)))))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfRange(format!("{}: id {bad} >= table size {v}", self.label("embedding"))));
        }
        let t = self.values[table.0].data();
        let data: Vec<T> = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let out = Tensor::matrix(ids.len(), d, data)?;
        let ids = ids.to_vec();
        Ok(self.push(
            "embedding",
            out,
            Some(Box::new(move |g, vals, buf| {
                let gt = buf.acc(table, vals);
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            })),
        ))
    }

    /// Inverted dropout; the identity outside training or for `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.values[a.0].len();
        let mask: Vec<T> = (0..n).map(|_| if self.rng.bernoulli(p) { T::zero() } else { keep }).collect();
        let x = &self.values[a.0];
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?;
        Ok(self.push(
            "dropout",
            out,
            Some(Box::new(move |g, vals, buf| {
                let gx: Vec<T> = g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
                buf.add(a, vals, &gx);
            })),
        ))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.values[a.0].data().iter().copied().sum();
        self.push(
            "sum",
            Tensor::scalar(s),
            Some(Box::new(move |g, vals, buf| {
                let g0 = g[0];
                buf.acc(a, vals).iter_mut().for_each(|d| *d += g0);
            })),
        )
    }

    /// `sum(a * w)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor<T>) -> Result<Var> {
        if w.len() != self.values[a.0].len() {
            return Err(Error::shape(&self.label("weighted_sum"), "weights differ in size"));
        }
        let s: T = self.values[a.0].data().iter().zip(w.data()).map(|(&p, &q)| p * q).sum();
        let w = w.data().to_vec();
        Ok(self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Some(Box::new(move |g, vals, buf| {
                let g0 = g[0];
                buf.acc(a, vals).iter_mut().zip(&w).for_each(|(d, &wv)| *d += g0 * wv);
            })),
        ))
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "mean_rows")?;
        if m == 0 {
            return Err(Error::shape(&self.label("mean_rows"), "no rows"));
        }
        let x = self.values[a.0].data();
        let inv = T::of(1.0 / m as f64);
        let mut data = vec![T::zero(); n];
        for row in x.chunks_exact(n) {
            data.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor::matrix(1, n, data)?;
        Ok(self.push(
            "mean_rows",
            out,
            Some(Box::new(move |g, vals, buf| {
                let ga = buf.acc(a, vals);
                for row in ga.chunks_exact_mut(n) {
                    row.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * inv);
                }
            })),
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "l2_normalize_rows")?;
        let x = self.values[a.0].data();
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for (r, row) in x.chunks_exact(n).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(Error::Numerical(format!("{}: row {r} has zero norm", self.label("l2_normalize_rows"))));
            }
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let me = Var(self.values.len());
        Ok(self.push(
            "l2_normalize_rows",
            out,
            Some(Box::new(move |g, vals, buf| {
                let y = vals[me.0].data();
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        gx[r * n + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                buf.add(a, vals, &gx);
            })),
        ))
    }

    /// Mean absolute difference, a scalar.
    pub fn mean_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_l1")?;
        let (x, y) = (self.values[a.0].data(), self.values[b.0].data());
        let n = x.len().max(1);
        let s: f64 = x.iter().zip(y).map(|(&p, &q)| (p - q).abs().f64()).sum();
        let inv = T::of(1.0 / n as f64);
        Ok(self.push(
            "mean_l1",
            Tensor::scalar(T::of(s / n as f64)),
            Some(Box::new(move |g, vals, buf| {
                let (x, y) = (vals[a.0].data(), vals[b.0].data());
                let d: Vec<T> = x.iter().zip(y).map(|(&p, &q)| g[0] * inv * sign(p - q)).collect();
                buf.add(a, vals, &d);
                for (acc, &dv) in buf.acc(b, vals).iter_mut().zip(&d) {
                    *acc -= dv;
                }
            })),
        ))
    }

    /// Mean softmax cross-entropy of each row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape(&self.label("cross_entropy"), format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::OutOfRange(format!("{}: target {bad} >= {n} classes", self.label("cross_entropy"))));
        }
        let mut probs = self.values[logits.0].data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_exact_mut(n).zip(targets) {
            let lse = log_sum_exp(row);
            total += (lse - row[t]).f64();
            softmax_in_place(row);
        }
        let inv = T::of(1.0 / m as f64);
        let targets = targets.to_vec();
        Ok(self.push(
            "cross_entropy",
            Tensor::scalar(T::of(total / m as f64)),
            Some(Box::new(move |g, vals, buf| {
                let scale = g[0] * inv;
                let gl = buf.acc(logits, vals);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * n + j] += scale * (probs[r * n + j] - onehot);
                    }
                }
            })),
        ))
    }
}

/// Additive mask value for disallowed attention positions.
pub const MASK_NEG: f64 = -1e9;

#[inline]
pub(crate) fn sigmoid_t<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus_t<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
