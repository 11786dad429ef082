use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::{DType, SeededRng, TensorBundle};
use crate::Real;

use super::tensor::Tensor;

/// FNV-1a, used to derive a per-parameter RNG stream from its name so that
/// initialization does not depend on registration order.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Named parameters with seeded initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    seed: u64,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { seed, params: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Invalid("parameter name is empty".into()));
        }
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = SeededRng::new(self.seed).fork(name_stream(name));
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::of(value)))
    }

    /// `{name}.weight` `[out, in]` and `{name}.bias` `[out]`.
    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<()> {
        self.uniform(&format!("{name}.weight"), &[output, input], input)?;
        self.uniform(&format!("{name}.bias"), &[output], input)
    }

    /// `{name}.weight` `[out, in * kernel]` and `{name}.bias` `[out]`.
    pub fn conv1d(&mut self, name: &str, input: usize, output: usize, kernel: usize) -> Result<()> {
        self.uniform(&format!("{name}.weight"), &[output, input * kernel], input * kernel)?;
        self.uniform(&format!("{name}.bias"), &[output], input * kernel)
    }

    /// `{name}.weight` `[in, out * kernel]` and `{name}.bias` `[out]`.
    pub fn conv_transpose1d(&mut self, name: &str, input: usize, output: usize, kernel: usize) -> Result<()> {
        self.uniform(&format!("{name}.weight"), &[input, output * kernel], input * kernel)?;
        self.uniform(&format!("{name}.bias"), &[output], input * kernel)
    }

    /// `{name}.weight` ones and `{name}.bias` zeros.
    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{name}.weight"), &[dim], 1.0)?;
        self.constant(&format!("{name}.bias"), &[dim], 0.0)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { seed: self.seed, params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn to_bundle(&self) -> Result<TensorBundle> {
        let mut b = TensorBundle::new();
        for (name, t) in &self.params {
            let data: Vec<f32> = t.data().iter().map(|v| v.f64() as f32).collect();
            b.push_f32(name, t.shape(), &data)?;
        }
        Ok(b)
    }

    /// Overwrites every parameter from same-named bundle entries. Shapes are
    /// fixed at creation, so a shape change is an error.
    pub fn load_bundle(&mut self, bundle: &TensorBundle) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let entry = bundle.get(name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if entry.shape != t.shape() {
                return Err(Error::shape(name, format!("stored shape {:?}, expected {:?}", entry.shape, t.shape())));
            }
            let values: Vec<f64> = match entry.dtype {
                DType::F32 => bundle.f32(name)?.1.into_iter().map(f64::from).collect(),
                DType::F64 => bundle.f64(name)?.1,
                DType::I64 => return Err(Error::Format(format!("parameter `{name}` stored as i64"))),
            };
            t.data_mut().iter_mut().zip(values).for_each(|(d, v)| *d = T::of(v));
        }
        Ok(())
    }
}
