use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{SeededRng, TensorBundle};

use super::codebook::{fsq_quantize, levels_to_index, FsqCodebook};

pub const TOKENS_UPPER: &str = "tokens_upper";
pub const TOKENS_LOWER: &str = "tokens_lower";

/// Separate upper- and lower-body codebooks sharing one id space: upper ids
/// occupy `[0, k_u)` and lower ids `[k_u, k_u + k_l)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionalCodebooks {
    pub upper: FsqCodebook,
    pub lower: FsqCodebook,
}

impl Default for CompositionalCodebooks {
    fn default() -> Self {
        Self { upper: FsqCodebook::standard(), lower: FsqCodebook::standard() }
    }
}

impl CompositionalCodebooks {
    pub fn lower_offset(&self) -> usize {
        self.upper.size()
    }

    pub fn vocab_size(&self) -> usize {
        self.upper.size() + self.lower.size()
    }

    pub fn is_upper(&self, id: usize) -> bool {
        id < self.upper.size()
    }

    pub fn is_lower(&self, id: usize) -> bool {
        (self.lower_offset()..self.vocab_size()).contains(&id)
    }
}

fn quantize_rows(latents: &[f64], cb: &FsqCodebook, offset: usize, what: &str) -> Result<Vec<usize>> {
    let d = cb.dims();
    if !latents.len().is_multiple_of(d) {
        return Err(Error::shape(what, format!("{} latent values are not a multiple of width {d}", latents.len())));
    }
    latents
        .chunks_exact(d)
        .map(|z| {
            let (levels, _) = fsq_quantize(z, cb)?;
            Ok(levels_to_index(&levels, cb)? + offset)
        })
        .collect()
}

/// Quantizes per-step latents (row-major `steps x d`) of both body halves.
pub fn tokenize_clip(upper: &[f64], lower: &[f64], books: &CompositionalCodebooks) -> Result<(Vec<usize>, Vec<usize>)> {
    let up = quantize_rows(upper, &books.upper, 0, "tokenize_clip.upper")?;
    let lo = quantize_rows(lower, &books.lower, books.lower_offset(), "tokenize_clip.lower")?;
    if up.len() != lo.len() {
        return Err(Error::shape("tokenize_clip", format!("{} upper steps vs {} lower", up.len(), lo.len())));
    }
    Ok((up, lo))
}

/// Per-code use counter over a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl UsageHistogram {
    pub fn new(size: usize) -> Self {
        Self { counts: vec![0; size], total: 0 }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn record(&mut self, id: usize) -> Result<()> {
        let size = self.counts.len();
        let slot = self
            .counts
            .get_mut(id)
            .ok_or_else(|| Error::OutOfRange(format!("code {id} outside histogram of {size}")))?;
        *slot += 1;
        self.total += 1;
        Ok(())
    }

    pub fn record_all(&mut self, ids: &[usize]) -> Result<()> {
        ids.iter().try_for_each(|&id| self.record(id))
    }

    /// Elementwise sum of two histograms over the same vocabulary.
    pub fn merge(&mut self, other: &UsageHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::shape("UsageHistogram::merge", "vocabulary sizes differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Codebook utilization: for each threshold, the fraction of codes used at
/// least that many times.
pub fn cur(hist: &UsageHistogram, thresholds: &[u64]) -> Vec<f64> {
    let n = hist.counts.len().max(1) as f64;
    thresholds.iter().map(|&th| hist.counts.iter().filter(|&&c| c >= th).count() as f64 / n).collect()
}

/// Minimal vector-quantization baseline: nearest neighbour over a fixed
/// seeded Gaussian codebook. No learning, no commitment loss.
#[derive(Debug, Clone)]
pub struct NearestNeighborQuantizer {
    dim: usize,
    codes: Vec<f64>,
}

impl NearestNeighborQuantizer {
    pub fn random(size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        Self { dim, codes: (0..size * dim).map(|_| rng.normal()).collect() }
    }

    pub fn size(&self) -> usize {
        self.codes.len() / self.dim
    }

    /// Index of the closest code; ties resolve to the lower index.
    pub fn quantize(&self, z: &[f64]) -> Result<usize> {
        if z.len() != self.dim {
            return Err(Error::shape("NearestNeighborQuantizer", format!("latent width {} vs {}", z.len(), self.dim)));
        }
        let mut best = (f64::INFINITY, 0);
        for (i, code) in self.codes.chunks_exact(self.dim).enumerate() {
            let d: f64 = code.iter().zip(z).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        Ok(best.1)
    }
}

/// Stores token sequences as `tokens_upper` / `tokens_lower`, shape `[T']`
/// for one sequence or `[N, T']` for several.
pub fn tokens_to_bundle(seqs: &[(Vec<usize>, Vec<usize>)], bundle: &mut TensorBundle) -> Result<()> {
    let steps = seqs.first().map(|s| s.0.len()).unwrap_or(0);
    if seqs.iter().any(|(u, l)| u.len() != steps || l.len() != steps) {
        return Err(Error::Invalid("token sequences must share one length".into()));
    }
    let shape: Vec<usize> = if seqs.len() == 1 { vec![steps] } else { vec![seqs.len(), steps] };
    let up: Vec<i64> = seqs.iter().flat_map(|(u, _)| u.iter().map(|&v| v as i64)).collect();
    let lo: Vec<i64> = seqs.iter().flat_map(|(_, l)| l.iter().map(|&v| v as i64)).collect();
    bundle.push_i64(TOKENS_UPPER, &shape, &up)?;
    bundle.push_i64(TOKENS_LOWER, &shape, &lo)
}

pub fn tokens_from_bundle(bundle: &TensorBundle) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let (su, up) = bundle.i64(TOKENS_UPPER)?;
    let (sl, lo) = bundle.i64(TOKENS_LOWER)?;
    if su != sl {
        return Err(Error::Format(format!("token shapes differ: {su:?} vs {sl:?}")));
    }
    let steps = match su.as_slice() {
        [t] | [_, t] => *t,
        _ => return Err(Error::Format(format!("token entries must be rank 1 or 2, got {su:?}"))),
    };
    let to_ids = |v: &[i64]| -> Result<Vec<usize>> {
        v.iter().map(|&x| usize::try_from(x).map_err(|_| Error::OutOfRange(format!("negative token id {x}")))).collect()
    };
    if steps == 0 {
        return Ok(vec![(Vec::new(), Vec::new())]);
    }
    up.chunks_exact(steps).zip(lo.chunks_exact(steps)).map(|(u, l)| Ok((to_ids(u)?, to_ids(l)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_latents_tokenize_to_center_code() {
        let books = CompositionalCodebooks::default();
        let (up, lo) = tokenize_clip(&[0.0; 45 * 4], &[0.0; 45 * 4], &books).unwrap();
        let center = levels_to_index(&[4, 2, 2, 2], &books.upper).unwrap();
        assert_eq!(up.len(), 45);
        assert_eq!(lo.len(), 45);
        assert!(up.iter().all(|&id| id == center));
        assert!(lo.iter().all(|&id| id == center + 1000));
    }

    #[test]
    fn width_mismatch() {
        let books = CompositionalCodebooks::default();
        assert!(tokenize_clip(&[0.0; 5], &[0.0; 4], &books).is_err());
        assert!(tokenize_clip(&[0.0; 8], &[0.0; 4], &books).is_err());
    }

    #[test]
    fn upper_and_lower_ids_disjoint() {
        let books = CompositionalCodebooks::default();
        let mut rng = SeededRng::new(4);
        let z: Vec<f64> = (0..40 * 4).map(|_| 3.0 * rng.normal()).collect();
        let (up, lo) = tokenize_clip(&z, &z, &books).unwrap();
        assert!(up.iter().all(|&id| books.is_upper(id)));
        assert!(lo.iter().all(|&id| books.is_lower(id)));
        assert_eq!(books.vocab_size(), 2000);
    }

    #[test]
    fn cur_examples() {
        let full = UsageHistogram::from_counts(vec![10; 1000]);
        assert_eq!(cur(&full, &[1, 5, 10]), vec![1.0, 1.0, 1.0]);
        let empty = UsageHistogram::new(1000);
        assert_eq!(cur(&empty, &[1, 5, 10]), vec![0.0, 0.0, 0.0]);
        let mixed = UsageHistogram::from_counts((0..1000).map(|i| if i < 500 { 1 } else { 20 }).collect());
        assert_eq!(cur(&mixed, &[1, 5, 10]), vec![1.0, 0.5, 0.5]);
    }

    #[test]
    fn histogram_merge() {
        let mut a = UsageHistogram::new(4);
        a.record_all(&[0, 1, 1]).unwrap();
        let mut b = UsageHistogram::new(4);
        b.record_all(&[3]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.counts(), &[1, 2, 0, 1]);
        assert_eq!(a.total(), 4);
        assert!(a.record(4).is_err());
    }

    #[test]
    fn nearest_neighbor_baseline() {
        let q = NearestNeighborQuantizer::random(16, 4, 1);
        let code = q.codes[4 * 5..4 * 6].to_vec();
        assert_eq!(q.quantize(&code).unwrap(), 5);
        assert_eq!(q.size(), 16);
    }

    #[test]
    fn token_bundle_round_trip() {
        let seqs = vec![(vec![1, 2, 3], vec![1001, 1002, 1003]), (vec![4, 5, 6], vec![1004, 1005, 1006])];
        let mut b = TensorBundle::new();
        tokens_to_bundle(&seqs, &mut b).unwrap();
        assert_eq!(b.get(TOKENS_UPPER).unwrap().shape, vec![2, 3]);
        assert_eq!(tokens_from_bundle(&b).unwrap(), seqs);
    }
}
