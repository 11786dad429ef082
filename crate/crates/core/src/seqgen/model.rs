//! Hybrid mamba/attention generator: music encoder, genre encoder and the
//! autoregressive dance decoder, plus short- and long-sequence generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::SeededRng;
use crate::nn::{ParamStore, Tensor};
use crate::Real;

use super::config::{HybridConfig, BOS_LOWER, BOS_UPPER, EMBED_ROWS, HALF_VOCAB, VOCAB};
use super::layers::{
    add_in_place, attend, ffn_block, init_attention, init_ffn, init_mamba, layer_norm, linear, mamba_block, project_kv,
    relu, MambaState,
};
use super::mask::{build_swa_mask, swa_window_start, AttentionMask};

/// Upper and lower token streams. Lower ids are global, in `[1000, 2000)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

impl TokenPair {
    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Argmax,
    /// Draw from the softmax of `logits / tau`.
    Temperature {
        tau: f64,
        seed: u64,
    },
}

/// Per-layer decoder state for incremental decoding.
#[derive(Debug, Clone)]
struct LayerCache<T> {
    mamba: MambaState<T>,
    self_k: Vec<T>,
    self_v: Vec<T>,
    music_k: Vec<T>,
    music_v: Vec<T>,
    genre_k: Vec<T>,
    genre_v: Vec<T>,
}

/// Decoder state after consuming `len` positions against a fixed music
/// encoding and genre vector.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    layers: Vec<LayerCache<T>>,
    music_len: usize,
    len: usize,
}

impl<T> DecoderCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct HybridModel<T: Real> {
    pub cfg: HybridConfig,
    pub params: ParamStore<T>,
}

fn music_layer(i: usize) -> String {
    format!("music.layer{i}")
}

fn dance_layer(i: usize) -> String {
    format!("dance.layer{i}")
}

impl<T: Real> HybridModel<T> {
    /// Seeded random parameters.
    pub fn new(cfg: HybridConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        let mut p = ParamStore::new(seed);
        p.linear("music.mlp0", cfg.music_dim, d)?;
        p.linear("music.mlp1", d, d)?;
        for i in 0..cfg.encoder_layers {
            let l = music_layer(i);
            init_mamba(&mut p, &format!("{l}.mamba"), &cfg)?;
            init_attention(&mut p, &format!("{l}.attn"), d)?;
            init_ffn(&mut p, &format!("{l}.ffn"), d, f)?;
        }
        p.layer_norm("music.norm", d)?;
        p.uniform("genre.embed", &[cfg.genres + 1, d], 1)?;
        init_ffn(&mut p, "genre.ffn", d, f)?;
        p.uniform("dance.embed", &[EMBED_ROWS, d], 1)?;
        for i in 0..cfg.decoder_layers {
            let l = dance_layer(i);
            init_mamba(&mut p, &format!("{l}.mamba"), &cfg)?;
            init_attention(&mut p, &format!("{l}.self"), d)?;
            init_attention(&mut p, &format!("{l}.music"), d)?;
            init_attention(&mut p, &format!("{l}.genre"), d)?;
            init_ffn(&mut p, &format!("{l}.ffn"), d, f)?;
        }
        p.layer_norm("head.norm", d)?;
        p.linear("head.proj", d, VOCAB)?;
        Ok(Self { cfg, params: p })
    }

    /// Music features `[T', music_dim]` to encodings `[T', model_dim]`.
    pub fn encode_music(&self, music: &[T]) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        if music.is_empty() || !music.len().is_multiple_of(cfg.music_dim) {
            return Err(Error::shape(
                "encode_music",
                format!("{} values for feature width {}", music.len(), cfg.music_dim),
            ));
        }
        let rows = music.len() / cfg.music_dim;
        let p = &self.params;
        let mut h = linear(p, "music.mlp0", music)?;
        relu(&mut h);
        let mut x = linear(p, "music.mlp1", &h)?;
        let mask = build_swa_mask(rows, cfg.swa_step, cfg.swa_stride)?;
        for i in 0..cfg.encoder_layers {
            let l = music_layer(i);
            x = mamba_block(p, &format!("{l}.mamba"), cfg, &x, &mut MambaState::new(cfg))?;
            let name = format!("{l}.attn");
            let a = layer_norm(p, &format!("{name}.norm"), &x)?;
            let (k, v) = project_kv(p, &name, &a)?;
            let o = attend(p, &name, cfg.heads, &a, &k, &v, &mask)?;
            add_in_place(&mut x, &o);
            ffn_block(p, &format!("{l}.ffn"), &mut x)?;
        }
        layer_norm(p, "music.norm", &x)
    }

    /// Genre id after optional training-time dropout to the null genre.
    pub fn genre_id(&self, genre: Option<usize>, train: bool, rng: &mut SeededRng) -> Result<usize> {
        let id = match genre {
            Some(g) if g >= self.cfg.genres => {
                return Err(Error::OutOfRange(format!("genre {g} not below {}", self.cfg.genres)));
            }
            Some(g) => g,
            None => self.cfg.null_genre(),
        };
        Ok(if train && rng.bernoulli(self.cfg.genre_dropout) { self.cfg.null_genre() } else { id })
    }

    /// Genre vector `[model_dim]`: embedding row plus a residual feed-forward.
    pub fn encode_genre(&self, genre: Option<usize>, train: bool, rng: &mut SeededRng) -> Result<Vec<T>> {
        let id = self.genre_id(genre, train, rng)?;
        let d = self.cfg.model_dim;
        let mut e = self.params.get("genre.embed")?.data()[id * d..(id + 1) * d].to_vec();
        ffn_block(&self.params, "genre.ffn", &mut e)?;
        Ok(e)
    }

    /// Fresh decoder state over a music encoding `[T', model_dim]` and genre vector.
    pub fn decoder_cache(&self, music_enc: &[T], genre: &[T]) -> Result<DecoderCache<T>> {
        let d = self.cfg.model_dim;
        if music_enc.is_empty() || !music_enc.len().is_multiple_of(d) || genre.len() != d {
            return Err(Error::shape(
                "decoder",
                format!("music {} and genre {} values for width {d}", music_enc.len(), genre.len()),
            ));
        }
        let p = &self.params;
        let mut layers = Vec::with_capacity(self.cfg.decoder_layers);
        for i in 0..self.cfg.decoder_layers {
            let l = dance_layer(i);
            let (music_k, music_v) = project_kv(p, &format!("{l}.music"), music_enc)?;
            let (genre_k, genre_v) = project_kv(p, &format!("{l}.genre"), genre)?;
            layers.push(LayerCache {
                mamba: MambaState::new(&self.cfg),
                self_k: Vec::new(),
                self_v: Vec::new(),
                music_k,
                music_v,
                genre_k,
                genre_v,
            });
        }
        Ok(DecoderCache { layers, music_len: music_enc.len() / d, len: 0 })
    }

    fn check_inputs(upper: &[usize], lower: &[usize]) -> Result<()> {
        if upper.len() != lower.len() {
            return Err(Error::shape("decoder", format!("{} upper vs {} lower inputs", upper.len(), lower.len())));
        }
        for &u in upper {
            if u >= HALF_VOCAB && u != BOS_UPPER {
                return Err(Error::OutOfRange(format!("upper input id {u}")));
            }
        }
        for &l in lower {
            if !(HALF_VOCAB..VOCAB).contains(&l) && l != BOS_LOWER {
                return Err(Error::OutOfRange(format!("lower input id {l}")));
            }
        }
        Ok(())
    }

    /// Consumes the next input positions and returns their logits `[m, 2000]`.
    pub fn decode_chunk(&self, cache: &mut DecoderCache<T>, upper: &[usize], lower: &[usize]) -> Result<Vec<T>> {
        Self::check_inputs(upper, lower)?;
        let (cfg, p, d) = (&self.cfg, &self.params, self.cfg.model_dim);
        let (pos0, m) = (cache.len, upper.len());
        if pos0 + m > cache.music_len {
            return Err(Error::shape(
                "decoder",
                format!("{} positions exceed {} music rows", pos0 + m, cache.music_len),
            ));
        }
        let embed = p.get("dance.embed")?.data();
        let mut x = Vec::with_capacity(m * d);
        for (&u, &l) in upper.iter().zip(lower) {
            x.extend(embed[u * d..(u + 1) * d].iter().zip(&embed[l * d..(l + 1) * d]).map(|(&a, &b)| a + b));
        }
        let window =
            |q: usize, k: usize| swa_window_start(pos0 + q, cfg.swa_step, cfg.swa_stride) <= k && k <= pos0 + q;
        let self_mask = AttentionMask::from_fn(m, pos0 + m, window);
        let music_mask = AttentionMask::from_fn(m, cache.music_len, window);
        let genre_mask = AttentionMask::from_fn(m, 1, |_, _| true);
        for (i, lc) in cache.layers.iter_mut().enumerate() {
            let l = dance_layer(i);
            x = mamba_block(p, &format!("{l}.mamba"), cfg, &x, &mut lc.mamba)?;

            let name = format!("{l}.self");
            let a = layer_norm(p, &format!("{name}.norm"), &x)?;
            let (k, v) = project_kv(p, &name, &a)?;
            lc.self_k.extend_from_slice(&k);
            lc.self_v.extend_from_slice(&v);
            let o = attend(p, &name, cfg.heads, &a, &lc.self_k, &lc.self_v, &self_mask)?;
            add_in_place(&mut x, &o);

            let name = format!("{l}.music");
            let a = layer_norm(p, &format!("{name}.norm"), &x)?;
            let o = attend(p, &name, cfg.heads, &a, &lc.music_k, &lc.music_v, &music_mask)?;
            add_in_place(&mut x, &o);

            let name = format!("{l}.genre");
            let a = layer_norm(p, &format!("{name}.norm"), &x)?;
            let o = attend(p, &name, cfg.heads, &a, &lc.genre_k, &lc.genre_v, &genre_mask)?;
            add_in_place(&mut x, &o);

            ffn_block(p, &format!("{l}.ffn"), &mut x)?;
        }
        cache.len += m;
        let h = layer_norm(p, "head.norm", &x)?;
        linear(p, "head.proj", &h)
    }

    /// Logits `[m, 2000]` for input positions `0..m` in one pass. Input
    /// position `t` sees inputs and music rows up to `t` only.
    pub fn decode_logits(&self, upper: &[usize], lower: &[usize], music_enc: &[T], genre: &[T]) -> Result<Vec<T>> {
        let mut cache = self.decoder_cache(music_enc, genre)?;
        self.decode_chunk(&mut cache, upper, lower)
    }

    /// Generates one token pair per music row. Up to `context` rows use
    /// cached autoregression from the begin tokens; each later token re-encodes
    /// the latest `context` music rows and decodes its window afresh.
    pub fn generate(&self, music: &[T], genre: Option<usize>, sampling: Sampling) -> Result<TokenPair> {
        let md = self.cfg.music_dim;
        if music.is_empty() || !music.len().is_multiple_of(md) {
            return Err(Error::shape("generate", format!("{} values for feature width {md}", music.len())));
        }
        let frames = music.len() / md;
        let ctx = self.cfg.context;
        let mut picker = Picker::new(sampling)?;
        let g = self.encode_genre(genre, false, &mut SeededRng::new(0))?;
        let short = frames.min(ctx);
        let enc = self.encode_music(&music[..short * md])?;
        let mut cache = self.decoder_cache(&enc, &g)?;
        let mut out = TokenPair { upper: Vec::with_capacity(frames), lower: Vec::with_capacity(frames) };
        let (mut pu, mut pl) = (BOS_UPPER, BOS_LOWER);
        for _ in 0..short {
            let logits = self.decode_chunk(&mut cache, &[pu], &[pl])?;
            (pu, pl) = picker.pick(&logits);
            out.upper.push(pu);
            out.lower.push(pl);
        }
        for t in short..frames {
            let w0 = t + 1 - ctx;
            let enc = self.encode_music(&music[w0 * md..(t + 1) * md])?;
            let logits = self.decode_logits(&out.upper[w0 - 1..t], &out.lower[w0 - 1..t], &enc, &g)?;
            let (u, l) = picker.pick(&logits[(ctx - 1) * VOCAB..]);
            out.upper.push(u);
            out.lower.push(l);
        }
        Ok(out)
    }

    /// `[T', music_dim]` music tensor convenience wrapper around [`Self::generate`].
    pub fn generate_tensor(&self, music: &Tensor<T>, genre: Option<usize>, sampling: Sampling) -> Result<TokenPair> {
        match music.shape() {
            [_, w] if *w == self.cfg.music_dim => self.generate(music.data(), genre, sampling),
            s => Err(Error::shape("generate", format!("music shape {s:?}, expected [T', {}]", self.cfg.music_dim))),
        }
    }
}

/// Token choice from one logit row: upper from `[0, 1000)`, lower from
/// `[1000, 2000)`, each under its own restricted softmax.
struct Picker {
    sampling: Sampling,
    rng: SeededRng,
}

impl Picker {
    fn new(sampling: Sampling) -> Result<Self> {
        let seed = match sampling {
            Sampling::Argmax => 0,
            Sampling::Temperature { tau, seed } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(Error::Invalid(format!("sampling temperature must be positive, got {tau}")));
                }
                seed
            }
        };
        Ok(Self { sampling, rng: SeededRng::new(seed) })
    }

    fn pick<T: Real>(&mut self, logits: &[T]) -> (usize, usize) {
        let u = self.pick_range(&logits[..HALF_VOCAB]);
        let l = self.pick_range(&logits[HALF_VOCAB..VOCAB]);
        (u, HALF_VOCAB + l)
    }

    fn pick_range<T: Real>(&mut self, row: &[T]) -> usize {
        match self.sampling {
            Sampling::Argmax => argmax(row),
            Sampling::Temperature { tau, .. } => {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
                let w: Vec<f64> = row.iter().map(|&v| ((v.f64() - max) / tau).exp()).collect();
                let mut r = self.rng.next_f64() * w.iter().sum::<f64>();
                for (i, &wi) in w.iter().enumerate() {
                    if r < wi {
                        return i;
                    }
                    r -= wi;
                }
                // Round-off fallthrough: last index with nonzero weight.
                w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0)
            }
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
