use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::Real;

use super::graph::Gradients;
use super::params::ParamStore;

fn check_shapes<T: Real>(params: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    for (name, g) in grads.params() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(name, format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    Ok(())
}

/// Plain gradient descent, `theta <- theta - lr * g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<T: Real>(&self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        check_shapes(params, grads)?;
        let lr = T::of(self.lr);
        for (name, g) in grads.params() {
            let p = params.get_mut(name)?;
            p.data_mut().iter_mut().zip(g.data()).for_each(|(v, &gv)| *v -= lr * gv);
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments. Moment buffers are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        check_shapes(params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads.params() {
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((theta, &gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gv;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *theta = T::of(theta.f64() - update);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `gamma` every `step_size` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLr {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepLr {
    /// Step size 5, decay 0.33.
    pub fn standard(base_lr: f64) -> Self {
        Self { base_lr, step_size: 5, gamma: 0.33 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new(0);
        p.insert("theta", Tensor::scalar(v)).unwrap();
        p
    }

    fn grads_of(p: &ParamStore<f64>, w: f64) -> Gradients<f64> {
        let mut g = Graph::new(p);
        let t = g.param("theta").unwrap();
        let loss = g.weighted_sum(t, &Tensor::scalar(w)).unwrap();
        g.backward(loss).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_store(1.0);
        let g = grads_of(&p, 2.0);
        Sgd { lr: 0.1 }.step(&mut p, &g).unwrap();
        assert!((p.get("theta").unwrap().item() - 0.8).abs() < 1e-15);
        let zero = grads_of(&p, 0.0);
        Sgd { lr: 0.1 }.step(&mut p, &zero).unwrap();
        assert!((p.get("theta").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for c in [3.0, -0.02, 250.0] {
            let mut p = scalar_store(1.0);
            let g = grads_of(&p, c);
            let mut adam = Adam::new(0.01, (0.5, 0.99));
            adam.step(&mut p, &g).unwrap();
            let expected = 1.0 - 0.01 * c / (c.abs() + 1e-8);
            assert!((p.get("theta").unwrap().item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn step_lr_schedule() {
        let s = StepLr::standard(1e-3);
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(4), 1e-3);
        assert_eq!(s.lr_at(5), 1e-3 * 0.33);
        assert_eq!(s.lr_at(10), 1e-3 * 0.33f64.powi(2));
    }
}
