//! Dual sequence encoder: per modality, an input projection followed by
//! transformer layers that each halve the sequence length by average
//! pooling. Trained with a symmetric contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::Real;

use super::metrics::Features;

/// Log of the contrastive logit scale; `exp(4.6052) = 100`.
pub const LOG_SCALE: f64 = 4.6052;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub log_scale: f64,
    pub music_dim: usize,
    pub dance_dim: usize,
}

impl RetrievalConfig {
    /// Nine layers, width 512 with 8 heads, dropout 0.25.
    pub fn full(music_dim: usize, dance_dim: usize) -> Self {
        Self {
            layers: 9,
            hidden: 512,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.25,
            log_scale: LOG_SCALE,
            music_dim,
            dance_dim,
        }
    }

    pub fn toy(music_dim: usize, dance_dim: usize) -> Self {
        Self { layers: 4, hidden: 32, heads: 4, ffn_dim: 64, dropout: 0.1, ..Self::full(music_dim, dance_dim) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "retrieval encoder needs layers >= 1 and heads dividing hidden, got {} layers, {} heads, hidden {}",
                self.layers, self.heads, self.hidden
            )));
        }
        if self.music_dim == 0 || self.dance_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Invalid("retrieval input and feed-forward widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Sequence lengths after each ceil-halving pool, starting from `len`.
pub fn pooled_lengths(len: usize, layers: usize) -> Vec<usize> {
    std::iter::successors(Some(len), |&l| Some(l.div_ceil(2))).skip(1).take(layers).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Music,
    Dance,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Music => "music",
            Modality::Dance => "dance",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T> {
    pub cfg: RetrievalConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> DualEncoder<T> {
    pub fn new(cfg: RetrievalConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        for (m, width) in [(Modality::Music, cfg.music_dim), (Modality::Dance, cfg.dance_dim)] {
            let p = m.prefix();
            params.linear(&format!("{p}.input"), width, cfg.hidden)?;
            for l in 0..cfg.layers {
                let attn = format!("{p}.layer{l}.attn");
                params.layer_norm(&format!("{attn}.norm"), cfg.hidden)?;
                for proj in ["q", "k", "v", "o"] {
                    params.linear(&format!("{attn}.{proj}"), cfg.hidden, cfg.hidden)?;
                }
                let ffn = format!("{p}.layer{l}.ffn");
                params.layer_norm(&format!("{ffn}.norm"), cfg.hidden)?;
                params.linear(&format!("{ffn}.fc0"), cfg.hidden, cfg.ffn_dim)?;
                params.linear(&format!("{ffn}.fc1"), cfg.ffn_dim, cfg.hidden)?;
            }
        }
        Ok(Self { cfg, params })
    }

    fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Music => self.cfg.music_dim,
            Modality::Dance => self.cfg.dance_dim,
        }
    }

    /// Zeroes every residual branch output so each layer acts as the
    /// identity and only the pooling remains.
    pub fn bypass_layers(&mut self) -> Result<()> {
        for m in [Modality::Music, Modality::Dance] {
            for l in 0..self.cfg.layers {
                for sub in ["attn.o", "ffn.fc1"] {
                    for part in ["weight", "bias"] {
                        let t = self.params.get_mut(&format!("{}.layer{l}.{sub}.{part}", m.prefix()))?;
                        t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
        }
        Ok(())
    }

    /// Encodes one `[frames, width]` sequence to a `[1, hidden]` vector.
    pub fn encode_sequence(&self, g: &mut Graph<'_, T>, m: Modality, x: &[T], frames: usize) -> Result<Var> {
        let width = self.input_dim(m);
        if frames == 0 {
            return Err(Error::Invalid("cannot encode an empty sequence".into()));
        }
        if x.len() != frames * width {
            return Err(Error::shape(
                &format!("{}.input", m.prefix()),
                format!("{} values for {frames} frames of width {width}", x.len()),
            ));
        }
        let p = m.prefix();
        let input = g.input(Tensor::matrix(frames, width, x.to_vec())?);
        let mut h = g.linear(input, &format!("{p}.input"))?;
        for l in 0..self.cfg.layers {
            h = self.layer(g, h, &format!("{p}.layer{l}"))?;
            h = g.avg_pool2(h)?;
        }
        if g.value(h).shape()[0] > 1 {
            h = g.mean_rows(h)?;
        }
        Ok(h)
    }

    fn layer(&self, g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
        let (heads, c) = (self.cfg.heads, self.cfg.hidden / self.cfg.heads);
        let attn = format!("{name}.attn");
        let h = g.layer_norm(x, &format!("{attn}.norm"))?;
        let q = g.linear(h, &format!("{attn}.q"))?;
        let k = g.linear(h, &format!("{attn}.k"))?;
        let v = g.linear(h, &format!("{attn}.v"))?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (lo, hi) = (head * c, (head + 1) * c);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul(qh, kh, true)?;
            let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
            let weights = g.softmax(scores)?;
            outs.push(g.matmul(weights, vh, false)?);
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let o = g.linear(o, &format!("{attn}.o"))?;
        let o = g.dropout(o, self.cfg.dropout)?;
        let x = g.add(x, o)?;
        let ffn = format!("{name}.ffn");
        let h = g.layer_norm(x, &format!("{ffn}.norm"))?;
        let h = g.linear(h, &format!("{ffn}.fc0"))?;
        let h = g.relu(h);
        let h = g.linear(h, &format!("{ffn}.fc1"))?;
        let h = g.dropout(h, self.cfg.dropout)?;
        g.add(x, h)
    }

    /// Stacks the encodings of several sequences into `[N, hidden]`.
    pub fn encode_batch(&self, g: &mut Graph<'_, T>, m: Modality, seqs: &[(&[T], usize)]) -> Result<Var> {
        let rows = seqs.iter().map(|&(x, frames)| self.encode_sequence(g, m, x, frames)).collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    /// Inference-mode feature vectors, one row per sequence.
    pub fn embed(&self, m: Modality, seqs: &[(&[T], usize)]) -> Result<Features> {
        use rayon::prelude::*;
        let rows: Vec<Vec<T>> = seqs
            .par_iter()
            .map(|&(x, frames)| {
                let mut g = Graph::new(&self.params);
                let v = self.encode_sequence(&mut g, m, x, frames)?;
                Ok(g.value(v).data().to_vec())
            })
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Err(Error::Invalid("no sequences to embed".into()));
        }
        Features::from_rows(&rows)
    }
}

/// Graph form of the symmetric contrastive loss over paired `[N, d]` rows.
pub fn clip_loss_graph<T: Real>(g: &mut Graph<'_, T>, music: Var, dance: Var, log_scale: f64) -> Result<Var> {
    let n = g.value(music).shape()[0];
    if n < 2 {
        return Err(Error::Invalid("contrastive loss needs at least 2 pairs".into()));
    }
    let m = g.l2_normalize_rows(music)?;
    let d = g.l2_normalize_rows(dance)?;
    let sim = g.matmul(m, d, true)?;
    let logits = g.scale(sim, log_scale.exp());
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy(logits, &targets)?;
    let cols_logits = g.transpose(logits)?;
    let cols = g.cross_entropy(cols_logits, &targets)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_length_chain_reaches_one() {
        assert_eq!(pooled_lengths(360, 9), vec![180, 90, 45, 23, 12, 6, 3, 2, 1]);
    }

    #[test]
    fn full_config_is_valid() {
        let cfg = RetrievalConfig::full(35, 147);
        cfg.validate().unwrap();
        assert_eq!((cfg.layers, cfg.hidden, cfg.heads), (9, 512, 8));
        assert!((cfg.log_scale.exp() - 100.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_width_mismatch() {
        let enc = DualEncoder::<f64>::new(RetrievalConfig::toy(3, 5), 0).unwrap();
        let mut g = Graph::new(&enc.params);
        assert!(enc.encode_sequence(&mut g, Modality::Music, &[0.0; 10], 2).is_err());
        assert!(enc.encode_sequence(&mut g, Modality::Music, &[], 0).is_err());
    }
}
