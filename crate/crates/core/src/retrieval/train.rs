//! Contrastive training of the dual encoder on a learnable paired corpus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::SeededRng;
use crate::nn::{Adam, Graph, StepLr};
use crate::Real;

use super::encoder::{clip_loss_graph, DualEncoder, Modality, RetrievalConfig};
use super::metrics::{rank_stats, recall_at_k, Features, RankStats};

/// Paired sequences, row-major `[frames, width]` each. The two modalities
/// may run at different frame rates.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCorpus {
    pub music_frames: usize,
    pub dance_frames: usize,
    pub music_dim: usize,
    pub dance_dim: usize,
    pub music: Vec<Vec<f64>>,
    pub dance: Vec<Vec<f64>>,
}

impl PairedCorpus {
    pub fn len(&self) -> usize {
        self.music.len()
    }

    pub fn is_empty(&self) -> bool {
        self.music.is_empty()
    }

    /// Checks that every sequence has the declared shape.
    pub fn validate(&self) -> Result<()> {
        if self.music.len() != self.dance.len() {
            return Err(Error::Invalid(format!("{} music vs {} dance sequences", self.music.len(), self.dance.len())));
        }
        let ok = |v: &[Vec<f64>], frames: usize, dim: usize| v.iter().all(|x| x.len() == frames * dim);
        if !ok(&self.music, self.music_frames, self.music_dim) || !ok(&self.dance, self.dance_frames, self.dance_dim) {
            return Err(Error::Invalid("paired corpus sequences do not match the declared shapes".into()));
        }
        Ok(())
    }

    fn frames(&self, m: Modality) -> usize {
        match m {
            Modality::Music => self.music_frames,
            Modality::Dance => self.dance_frames,
        }
    }

    fn f32_seqs(&self, m: Modality) -> Vec<Vec<f32>> {
        let src = match m {
            Modality::Music => &self.music,
            Modality::Dance => &self.dance,
        };
        src.iter().map(|x| x.iter().map(|&v| v as f32).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub pairs: usize,
    pub frames: usize,
    pub music_dim: usize,
    pub dance_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self { pairs: 256, frames: 16, music_dim: 32, dance_dim: 24, noise: 0.1, seed: 0 }
    }
}

/// Training and validation corpora sharing one linear map: music frames are
/// standard normal and each dance frame is `W m + noise` with a fixed
/// `W ∈ R^{dance_dim x music_dim}` scaled by `1/√music_dim`.
pub fn toy_corpus(spec: &ToyCorpusSpec) -> Result<(PairedCorpus, PairedCorpus)> {
    if spec.pairs < 2 || spec.frames == 0 || spec.music_dim == 0 || spec.dance_dim == 0 {
        return Err(Error::Invalid("toy corpus needs at least 2 pairs and positive sizes".into()));
    }
    let root = SeededRng::new(spec.seed);
    let mut wr = root.fork(0);
    let scale = 1.0 / (spec.music_dim as f64).sqrt();
    let w: Vec<f64> = (0..spec.dance_dim * spec.music_dim).map(|_| wr.normal() * scale).collect();
    let split = |stream: u64| {
        let mut rng = root.fork(stream);
        let mut music = Vec::with_capacity(spec.pairs);
        let mut dance = Vec::with_capacity(spec.pairs);
        for _ in 0..spec.pairs {
            let m: Vec<f64> = (0..spec.frames * spec.music_dim).map(|_| rng.normal()).collect();
            let mut d = Vec::with_capacity(spec.frames * spec.dance_dim);
            for frame in m.chunks_exact(spec.music_dim) {
                for row in w.chunks_exact(spec.music_dim) {
                    let v: f64 = row.iter().zip(frame).map(|(a, b)| a * b).sum();
                    d.push(v + spec.noise * rng.normal());
                }
            }
            music.push(m);
            dance.push(d);
        }
        PairedCorpus {
            music_frames: spec.frames,
            dance_frames: spec.frames,
            music_dim: spec.music_dim,
            dance_dim: spec.dance_dim,
            music,
            dance,
        }
    };
    Ok((split(1), split(2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub seed: u64,
}

impl Default for RetrievalTrainOptions {
    fn default() -> Self {
        Self { epochs: 15, batch: 32, lr: 1e-3, betas: (0.9, 0.999), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Validation retrieval of dance queries against the music gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub gallery: usize,
    pub r_at_5: f64,
    /// `5 / gallery`, the expected recall of an uninformed ranking.
    pub null_r_at_5: f64,
    pub ranks: RankStats,
}

pub fn retrieval_report(enc: &DualEncoder<f32>, corpus: &PairedCorpus) -> Result<RetrievalReport> {
    let (music, dance) = embed_corpus(enc, corpus)?;
    let n = corpus.len();
    Ok(RetrievalReport {
        gallery: n,
        r_at_5: recall_at_k(&dance, &music, 5.min(n))?,
        null_r_at_5: 5.min(n) as f64 / n as f64,
        ranks: rank_stats(&dance, &music)?,
    })
}

pub fn embed_corpus(enc: &DualEncoder<f32>, corpus: &PairedCorpus) -> Result<(Features, Features)> {
    corpus.validate()?;
    let embed = |m: Modality| {
        let data = corpus.f32_seqs(m);
        let seqs: Vec<(&[f32], usize)> = data.iter().map(|x| (x.as_slice(), corpus.frames(m))).collect();
        enc.embed(m, &seqs)
    };
    Ok((embed(Modality::Music)?, embed(Modality::Dance)?))
}

/// Adam under the step schedule, one learning rate per epoch. Returns the
/// mean batch loss of every epoch.
pub fn train_retrieval(
    enc: &mut DualEncoder<f32>,
    corpus: &PairedCorpus,
    opts: &RetrievalTrainOptions,
) -> Result<Vec<EpochLog>> {
    if corpus.len() < 2 || corpus.music_dim != enc.cfg.music_dim || corpus.dance_dim != enc.cfg.dance_dim {
        return Err(Error::Invalid(format!(
            "corpus ({} pairs, widths {}/{}) does not fit the encoder (widths {}/{})",
            corpus.len(),
            corpus.music_dim,
            corpus.dance_dim,
            enc.cfg.music_dim,
            enc.cfg.dance_dim
        )));
    }
    corpus.validate()?;
    let sched = StepLr::standard(opts.lr);
    let mut adam = Adam::new(opts.lr, opts.betas);
    let mut rng = SeededRng::new(opts.seed);
    let batch = opts.batch.clamp(2, corpus.len());
    let (music, dance) = (corpus.f32_seqs(Modality::Music), corpus.f32_seqs(Modality::Dance));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        adam.lr = sched.lr_at(epoch);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch).filter(|c| c.len() >= 2) {
            let grads = {
                let mut g = Graph::training(&enc.params, rng.next_u64());
                let ms: Vec<(&[f32], usize)> =
                    chunk.iter().map(|&i| (music[i].as_slice(), corpus.music_frames)).collect();
                let ds: Vec<(&[f32], usize)> =
                    chunk.iter().map(|&i| (dance[i].as_slice(), corpus.dance_frames)).collect();
                let fm = enc.encode_batch(&mut g, Modality::Music, &ms)?;
                let fd = enc.encode_batch(&mut g, Modality::Dance, &ds)?;
                let loss = clip_loss_graph(&mut g, fm, fd, enc.cfg.log_scale)?;
                total += g.value(loss).item().f64();
                g.backward(loss)?
            };
            adam.step(&mut enc.params, &grads)?;
            batches += 1;
        }
        let loss = total / batches as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("contrastive loss diverged at epoch {epoch}")));
        }
        log.push(EpochLog { epoch, lr: adam.lr, loss });
    }
    Ok(log)
}

/// One learning rate of a sweep with its trained encoder.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lr: f64,
    pub log: Vec<EpochLog>,
    pub report: RetrievalReport,
    pub encoder: DualEncoder<f32>,
}

/// Trains one encoder per learning rate and reports validation retrieval
/// for each.
pub fn lr_sweep(
    cfg: &RetrievalConfig,
    train: &PairedCorpus,
    val: &PairedCorpus,
    lrs: &[f64],
    opts: &RetrievalTrainOptions,
) -> Result<Vec<SweepRun>> {
    lrs.iter()
        .map(|&lr| {
            let mut encoder = DualEncoder::new(cfg.clone(), opts.seed)?;
            let log = train_retrieval(&mut encoder, train, &RetrievalTrainOptions { lr, ..opts.clone() })?;
            let report = retrieval_report(&encoder, val)?;
            Ok(SweepRun { lr, log, report, encoder })
        })
        .collect()
}
