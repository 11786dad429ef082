//! Two-stream motion tokenizer: per body half, a three-layer strided 1-D CNN
//! and a two-layer MLP map the pose sequence to `d`-channel latents, FSQ
//! rounds them, and a two-layer MLP plus three transposed convolutions map
//! the codes back to poses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsq::{fsq_quantize, index_to_values, levels_to_index, CompositionalCodebooks, FsqCodebook, UsageHistogram};
use crate::io::SeededRng;
use crate::motion::{BodyPartition, LossWeights, MotionClip, Skeleton};
use crate::Real;

use super::graph::{Gradients, Graph, Var};
use super::optim::Adam;
use super::params::ParamStore;
use super::tensor::Tensor;

const ENC_KERNEL: usize = 3;
const DEC_KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const LAYERS: usize = 3;
/// Frames per token: three stride-2 layers.
pub const DOWNSAMPLE: usize = 1 << LAYERS;
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";
const MIN_STD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Channels of the hidden convolution and MLP layers.
    pub width: usize,
    pub levels: Vec<u32>,
    pub joints: usize,
    pub weights: LossWeights,
}

impl TokenizerConfig {
    /// Feature width 512, the full-size setting.
    pub fn full() -> Self {
        Self { width: 512, levels: vec![8, 5, 5, 5], joints: 24, weights: LossWeights::default() }
    }

    /// Narrow variant for desk-scale training runs.
    pub fn toy() -> Self {
        Self { width: 64, ..Self::full() }
    }

    pub fn codebook(&self) -> Result<FsqCodebook> {
        FsqCodebook::new(self.levels.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    Upper,
    Lower,
}

impl Half {
    fn prefix(self) -> &'static str {
        match self {
            Half::Upper => "upper",
            Half::Lower => "lower",
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TokenizerForward {
    pub z_upper: Var,
    pub z_lower: Var,
    pub recon: Var,
}

/// Per-term reconstruction losses of one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconLosses {
    pub kin: f64,
    pub dyn_: f64,
    pub rec: f64,
}

#[derive(Debug, Clone)]
pub struct Tokenizer<T: Real> {
    pub cfg: TokenizerConfig,
    pub params: ParamStore<T>,
    pub skeleton: Skeleton,
    pub partition: BodyPartition,
}

impl<T: Real> Tokenizer<T> {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        let skeleton = if cfg.joints == 24 { Skeleton::smpl_like() } else { Skeleton::chain(cfg.joints) };
        let partition = BodyPartition::for_joints(cfg.joints);
        let d = cfg.codebook()?.dims();
        let w = cfg.width;
        if w == 0 {
            return Err(Error::Invalid("tokenizer width must be positive".into()));
        }
        let mut params = ParamStore::new(seed);
        for (half, cols) in [(Half::Upper, partition.upper.len()), (Half::Lower, partition.lower.len())] {
            let p = half.prefix();
            params.conv1d(&format!("{p}.enc.conv0"), cols, w, ENC_KERNEL)?;
            params.conv1d(&format!("{p}.enc.conv1"), w, w, ENC_KERNEL)?;
            params.conv1d(&format!("{p}.enc.conv2"), w, w, ENC_KERNEL)?;
            params.linear(&format!("{p}.enc.mlp0"), w, w)?;
            params.linear(&format!("{p}.enc.mlp1"), w, d)?;
            params.linear(&format!("{p}.dec.mlp0"), d, w)?;
            params.linear(&format!("{p}.dec.mlp1"), w, w)?;
            params.conv_transpose1d(&format!("{p}.dec.deconv0"), w, w, DEC_KERNEL)?;
            params.conv_transpose1d(&format!("{p}.dec.deconv1"), w, w, DEC_KERNEL)?;
            params.conv_transpose1d(&format!("{p}.dec.deconv2"), w, cols, DEC_KERNEL)?;
        }
        let width = 3 + 6 * cfg.joints;
        params.constant(NORM_MEAN, &[width], 0.0)?;
        params.constant(NORM_STD, &[width], 1.0)?;
        Ok(Self { cfg, params, skeleton, partition })
    }

    /// Sets the encoder's per-column input standardization to the corpus
    /// mean and standard deviation. These are constants of the model, not
    /// trained; the decoder still predicts raw poses.
    pub fn fit_normalizer(&mut self, clips: &[MotionClip]) -> Result<()> {
        let width = 3 + 6 * self.cfg.joints;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = 0usize;
        for clip in clips {
            self.check_clip(clip)?;
            for t in 0..clip.frames() {
                for (j, &v) in clip.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += clip.frames();
        }
        if n == 0 {
            return Err(Error::Invalid("cannot fit a normalizer on an empty corpus".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(MIN_STD)).collect();
        self.params.get_mut(NORM_MEAN)?.data_mut().iter_mut().zip(&mean).for_each(|(d, &v)| *d = T::of(v));
        self.params.get_mut(NORM_STD)?.data_mut().iter_mut().zip(&std).for_each(|(d, &v)| *d = T::of(v));
        Ok(())
    }

    /// Normalization constants as graph inputs, so they receive no updates.
    fn norm_inputs(&self, g: &mut Graph<'_, T>) -> Result<[Var; 2]> {
        let mean = self.params.get(NORM_MEAN)?;
        let std = self.params.get(NORM_STD)?;
        let neg: Vec<T> = mean.data().iter().map(|&v| -v).collect();
        let inv: Vec<T> = std.data().iter().map(|&v| T::one() / v).collect();
        Ok([g.input(Tensor::new(mean.shape().to_vec(), neg)?), g.input(Tensor::new(std.shape().to_vec(), inv)?)])
    }

    fn normalize(&self, g: &mut Graph<'_, T>, pose: Var) -> Result<Var> {
        let [neg_mean, inv_std] = self.norm_inputs(g)?;
        let centered = g.add_row(pose, neg_mean)?;
        g.mul_row(centered, inv_std)
    }

    pub fn codebooks(&self) -> Result<CompositionalCodebooks> {
        let cb = self.cfg.codebook()?;
        Ok(CompositionalCodebooks { upper: cb.clone(), lower: cb })
    }

    fn check_clip(&self, clip: &MotionClip) -> Result<()> {
        if clip.joints() != self.cfg.joints {
            return Err(Error::shape(
                "tokenizer",
                format!("clip has {} joints, tokenizer {}", clip.joints(), self.cfg.joints),
            ));
        }
        if clip.frames() == 0 || !clip.frames().is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Invalid(format!(
                "clip length {} is not a positive multiple of {DOWNSAMPLE}",
                clip.frames()
            )));
        }
        Ok(())
    }

    pub fn pose_input(clip: &MotionClip) -> Tensor<T> {
        Tensor::matrix(clip.frames(), clip.width(), clip.as_slice().iter().map(|&v| T::of(v)).collect()).unwrap()
    }

    /// Pre-quantization latents `[T / 8, d]` of one body half.
    pub fn encode_half(&self, g: &mut Graph<'_, T>, pose: Var, half: Half) -> Result<Var> {
        let p = half.prefix();
        let cols = match half {
            Half::Upper => &self.partition.upper,
            Half::Lower => &self.partition.lower,
        };
        let x = self.normalize(g, pose)?;
        let mut h = g.gather_cols(x, cols)?;
        for i in 0..LAYERS {
            h = g.conv1d(h, &format!("{p}.enc.conv{i}"), ENC_KERNEL, STRIDE, PAD)?;
            h = g.relu(h);
        }
        h = g.linear(h, &format!("{p}.enc.mlp0"))?;
        h = g.relu(h);
        g.linear(h, &format!("{p}.enc.mlp1"))
    }

    /// Pose columns of one body half from quantized codes `[T / 8, d]`.
    pub fn decode_half(&self, g: &mut Graph<'_, T>, codes: Var, half: Half) -> Result<Var> {
        let p = half.prefix();
        let mut h = g.linear(codes, &format!("{p}.dec.mlp0"))?;
        h = g.relu(h);
        h = g.linear(h, &format!("{p}.dec.mlp1"))?;
        for i in 0..LAYERS {
            h = g.relu(h);
            h = g.conv_transpose1d(h, &format!("{p}.dec.deconv{i}"), DEC_KERNEL, STRIDE, PAD)?;
        }
        Ok(h)
    }

    /// Reassembles `[lower | upper]` column blocks into pose layout.
    pub fn merge_halves(&self, g: &mut Graph<'_, T>, upper: Var, lower: Var) -> Result<Var> {
        let both = g.concat_cols(&[lower, upper])?;
        g.gather_cols(both, &self.partition.inverse())
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, pose: Var) -> Result<TokenizerForward> {
        let z_upper = self.encode_half(g, pose, Half::Upper)?;
        let z_lower = self.encode_half(g, pose, Half::Lower)?;
        let q_upper = g.fsq_ste(z_upper, &self.cfg.levels)?;
        let q_lower = g.fsq_ste(z_lower, &self.cfg.levels)?;
        let up = self.decode_half(g, q_upper, Half::Upper)?;
        let lo = self.decode_half(g, q_lower, Half::Lower)?;
        let recon = self.merge_halves(g, up, lo)?;
        Ok(TokenizerForward { z_upper, z_lower, recon })
    }

    /// Reconstruction loss graph: parameter and joint-position L1, plus
    /// weighted velocity and acceleration L1 on the parameters.
    pub fn loss(&self, g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
        let (kin, dyn_) = self.loss_terms(g, pred, target)?;
        g.add(kin, dyn_)
    }

    pub fn loss_terms(&self, g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<(Var, Var)> {
        let params = g.mean_l1(pred, target)?;
        let jp = g.forward_kinematics(pred, &self.skeleton)?;
        let jt = g.forward_kinematics(target, &self.skeleton)?;
        let joints = g.mean_l1(jp, jt)?;
        let kin = g.add(params, joints)?;
        let vp = g.time_diff(pred)?;
        let vt = g.time_diff(target)?;
        let vel = g.mean_l1(vp, vt)?;
        let ap = g.time_diff(vp)?;
        let at = g.time_diff(vt)?;
        let acc = g.mean_l1(ap, at)?;
        let vel = g.scale(vel, self.cfg.weights.alpha1);
        let acc = g.scale(acc, self.cfg.weights.alpha2);
        let dyn_ = g.add(vel, acc)?;
        Ok((kin, dyn_))
    }

    /// Loss and parameter gradients of one clip.
    pub fn clip_gradients(&self, clip: &MotionClip) -> Result<(f64, Gradients<T>)> {
        self.check_clip(clip)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(Self::pose_input(clip));
        let fwd = self.forward(&mut g, x)?;
        let loss = self.loss(&mut g, fwd.recon, x)?;
        let value = g.value(loss).item().f64();
        Ok((value, g.backward(loss)?))
    }

    /// Reconstruction losses of a clip passed through the quantizer.
    pub fn evaluate(&self, clip: &MotionClip) -> Result<ReconLosses> {
        self.check_clip(clip)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(Self::pose_input(clip));
        let fwd = self.forward(&mut g, x)?;
        let (kin, dyn_) = self.loss_terms(&mut g, fwd.recon, x)?;
        let (kin, dyn_) = (g.value(kin).item().f64(), g.value(dyn_).item().f64());
        Ok(ReconLosses { kin, dyn_, rec: kin + dyn_ })
    }

    /// Upper ids in `[0, K)` and lower ids in `[K, 2K)`, one per 8 frames.
    pub fn tokenize(&self, clip: &MotionClip) -> Result<(Vec<usize>, Vec<usize>)> {
        self.check_clip(clip)?;
        let books = self.codebooks()?;
        let mut g = Graph::new(&self.params);
        let x = g.input(Self::pose_input(clip));
        let mut ids = Vec::with_capacity(2);
        for (half, offset) in [(Half::Upper, 0), (Half::Lower, books.lower_offset())] {
            let z = self.encode_half(&mut g, x, half)?;
            let zt = g.value(z);
            let (_, d) = zt.dims2().unwrap();
            let row_ids = zt
                .data()
                .chunks_exact(d)
                .map(|row| {
                    let zr: Vec<f64> = row.iter().map(|v| v.f64()).collect();
                    let (levels, _) = fsq_quantize(&zr, &books.upper)?;
                    Ok(levels_to_index(&levels, &books.upper)? + offset)
                })
                .collect::<Result<Vec<usize>>>()?;
            ids.push(row_ids);
        }
        let lower = ids.pop().unwrap();
        let upper = ids.pop().unwrap();
        Ok((upper, lower))
    }

    /// Pose sequence `[8 * steps]` decoded from token ids.
    pub fn detokenize(&self, upper: &[usize], lower: &[usize]) -> Result<MotionClip> {
        if upper.len() != lower.len() || upper.is_empty() {
            return Err(Error::Invalid(format!("token streams of length {} and {}", upper.len(), lower.len())));
        }
        let books = self.codebooks()?;
        let values = |ids: &[usize], cb: &FsqCodebook, offset: usize| -> Result<Tensor<T>> {
            let mut data = Vec::with_capacity(ids.len() * cb.dims());
            for &id in ids {
                let local = id.checked_sub(offset).filter(|&l| l < cb.size()).ok_or_else(|| {
                    Error::OutOfRange(format!("token {id} outside [{offset}, {})", offset + cb.size()))
                })?;
                data.extend(index_to_values(local, cb)?.into_iter().map(T::of));
            }
            Tensor::matrix(ids.len(), cb.dims(), data)
        };
        let mut g = Graph::new(&self.params);
        let qu = g.input(values(upper, &books.upper, 0)?);
        let ql = g.input(values(lower, &books.lower, books.lower_offset())?);
        let up = self.decode_half(&mut g, qu, Half::Upper)?;
        let lo = self.decode_half(&mut g, ql, Half::Lower)?;
        let recon = self.merge_halves(&mut g, up, lo)?;
        let t = g.value(recon);
        let frames = t.dims2().unwrap().0;
        MotionClip::new(frames, self.cfg.joints, t.to_f64())
    }

    /// Mean loss and summed gradients over clips, computed in parallel and
    /// reduced in clip order so the result does not depend on scheduling.
    pub fn batch_gradients(&self, clips: &[&MotionClip]) -> Result<(f64, Gradients<T>)> {
        let per_clip: Vec<(f64, Gradients<T>)> =
            clips.par_iter().map(|c| self.clip_gradients(c)).collect::<Result<_>>()?;
        let mut total = Gradients::empty();
        let mut loss = 0.0;
        for (l, g) in &per_clip {
            loss += l;
            total.accumulate(g);
        }
        let n = clips.len().max(1) as f64;
        total.scale(1.0 / n);
        Ok((loss / n, total))
    }

    pub fn mean_rec(&self, clips: &[MotionClip]) -> Result<f64> {
        let losses: Vec<ReconLosses> = clips.par_iter().map(|c| self.evaluate(c)).collect::<Result<_>>()?;
        Ok(losses.iter().map(|l| l.rec).sum::<f64>() / clips.len().max(1) as f64)
    }

    /// Use counts of every id in the joint upper/lower vocabulary.
    pub fn usage(&self, clips: &[MotionClip]) -> Result<UsageHistogram> {
        let tokens: Vec<(Vec<usize>, Vec<usize>)> =
            clips.par_iter().map(|c| self.tokenize(c)).collect::<Result<_>>()?;
        let mut hist = UsageHistogram::new(self.codebooks()?.vocab_size());
        for (up, lo) in &tokens {
            hist.record_all(up)?;
            hist.record_all(lo)?;
        }
        Ok(hist)
    }
}

/// Options for [`train_tokenizer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 200, batch: 32, lr: 1e-3, betas: (0.5, 0.99), seed: 0 }
    }
}

/// Fits the input normalizer, then runs Adam on minibatches of clips.
/// Returns the per-step batch losses.
pub fn train_tokenizer(tok: &mut Tokenizer<f32>, clips: &[MotionClip], opts: &TrainOptions) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    tok.fit_normalizer(clips)?;
    let mut adam = Adam::new(opts.lr, opts.betas);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut rng = SeededRng::new(opts.seed);
    let batch = opts.batch.clamp(1, clips.len());
    let mut cursor = clips.len();
    let mut history = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        if cursor + batch > clips.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let picked: Vec<&MotionClip> = order[cursor..cursor + batch].iter().map(|&i| &clips[i]).collect();
        cursor += batch;
        let (loss, grads) = tok.batch_gradients(&picked)?;
        adam.step(&mut tok.params, &grads)?;
        history.push(loss);
    }
    Ok(history)
}
