use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Implicit product-grid codebook: channel `i` takes one of `levels[i]`
/// values `0, 1/(L-1), ..., 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqCodebook {
    levels: Vec<u32>,
}

impl FsqCodebook {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Invalid("FSQ needs at least one channel".into()));
        }
        if let Some(l) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::Invalid(format!("every FSQ channel needs >= 2 levels, got {l}")));
        }
        levels
            .iter()
            .try_fold(1u64, |acc, &l| acc.checked_mul(l as u64).filter(|&k| k <= u32::MAX as u64))
            .ok_or_else(|| Error::Invalid("FSQ codebook size overflows".into()))?;
        Ok(Self { levels })
    }

    /// `L = [8, 5, 5, 5]`, 1000 codes.
    pub fn standard() -> Self {
        Self::new(vec![8, 5, 5, 5]).unwrap()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    pub fn size(&self) -> usize {
        self.levels.iter().map(|&l| l as usize).product()
    }

    /// Dequantized value of a level on channel `i`.
    pub fn value(&self, channel: usize, level: u32) -> f64 {
        level as f64 / (self.levels[channel] - 1) as f64
    }
}

/// Level and dequantized value for one channel. Ties round away from zero.
#[inline]
pub fn quantize_scalar(z: f64, levels: u32) -> (u32, f64) {
    let top = (levels - 1) as f64;
    let level = (sigmoid(z) * top).round().clamp(0.0, top);
    (level as u32, level / top)
}

/// Bounds each channel with a sigmoid and rounds it onto the channel's grid.
/// Returns the integer levels and the dequantized values in `[0, 1]`.
pub fn fsq_quantize(z: &[f64], cb: &FsqCodebook) -> Result<(Vec<u32>, Vec<f64>)> {
    if z.len() != cb.dims() {
        return Err(Error::shape("fsq_quantize", format!("latent has {} channels, codebook {}", z.len(), cb.dims())));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite latent {v}")));
    }
    Ok(z.iter().zip(cb.levels()).map(|(&x, &l)| quantize_scalar(x, l)).unzip())
}

/// Mixed-radix index with channel 0 as the least significant digit.
pub fn levels_to_index(levels: &[u32], cb: &FsqCodebook) -> Result<usize> {
    if levels.len() != cb.dims() {
        return Err(Error::shape("levels_to_index", format!("{} levels for {} channels", levels.len(), cb.dims())));
    }
    let mut index = 0usize;
    for (&l, &radix) in levels.iter().zip(cb.levels()).rev() {
        if l >= radix {
            return Err(Error::OutOfRange(format!("level {l} on a {radix}-level channel")));
        }
        index = index * radix as usize + l as usize;
    }
    Ok(index)
}

pub fn index_to_levels(index: usize, cb: &FsqCodebook) -> Result<Vec<u32>> {
    if index >= cb.size() {
        return Err(Error::OutOfRange(format!("code {index} >= codebook size {}", cb.size())));
    }
    let mut rest = index;
    Ok(cb
        .levels()
        .iter()
        .map(|&radix| {
            let l = (rest % radix as usize) as u32;
            rest /= radix as usize;
            l
        })
        .collect())
}

/// Dequantized latent vector of a code.
pub fn index_to_values(index: usize, cb: &FsqCodebook) -> Result<Vec<f64>> {
    Ok(index_to_levels(index, cb)?.into_iter().enumerate().map(|(i, l)| cb.value(i, l)).collect())
}

/// Latent whose quantization lands exactly on `levels`: the logit of each
/// level's value, with the end points pulled in from +/- infinity.
pub fn canonical_latent(levels: &[u32], cb: &FsqCodebook) -> Vec<f64> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let v = cb.value(i, l).clamp(1e-6, 1.0 - 1e-6);
            (v / (1.0 - v)).ln()
        })
        .collect()
}
