//! Retrieval training, feature embedding and the metric report.

use std::path::{Path, PathBuf};

use anyhow::Context;
use chorekit::io::TensorBundle;
use chorekit::motion::{clips_from_bundle, MOTION_ENTRY};
use chorekit::nn::StepLr;
use chorekit::retrieval::{
    evaluate as metrics, lr_sweep, toy_corpus, DualEncoder, Features, Modality, PairedCorpus, RetrievalConfig,
    RetrievalTrainOptions, ToyCorpusSpec, FEATURES_ENTRY,
};
use chorekit::Error;
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::bundles::{self, music_from_bundle, MUSIC_ENTRY};
use crate::data::load_clips;
use crate::manifest::Recorder;
use crate::Run;

/// Retrieval queries are dance features; the gallery is music features.
pub const QUERY_DIRECTION: &str = "dance->music";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderPreset {
    Toy,
    Full,
}

impl EncoderPreset {
    fn config(self, music_dim: usize, dance_dim: usize) -> RetrievalConfig {
        match self {
            EncoderPreset::Toy => RetrievalConfig::toy(music_dim, dance_dim),
            EncoderPreset::Full => RetrievalConfig::full(music_dim, dance_dim),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainRetrievalArgs {
    /// Motion bundle paired with --music; without both, a learnable toy
    /// corpus is generated.
    #[arg(long, requires = "music")]
    pub motion: Option<PathBuf>,
    #[arg(long, requires = "motion")]
    pub music: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = EncoderPreset::Toy)]
    pub preset: EncoderPreset,
    /// Pairs per split of the toy corpus.
    #[arg(long, default_value_t = 256)]
    pub pairs: usize,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Train once per --sweep-lr value and keep the best validation R@5.
    #[arg(long)]
    pub lr_sweep: bool,
    #[arg(long = "sweep-lr", default_values_t = [1e-2, 1e-3, 1e-4])]
    pub sweep_lrs: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn data_corpus(motion: &Path, music: &Path) -> anyhow::Result<PairedCorpus> {
    let clips = load_clips(motion)?;
    let m =
        music_from_bundle(&bundles::load(music)?).with_context(|| format!("reading music from {}", music.display()))?;
    if m.seqs.len() != clips.len() {
        return Err(Error::Invalid(format!("{} music sequences for {} motion clips", m.seqs.len(), clips.len())).into());
    }
    Ok(PairedCorpus {
        music_frames: m.steps,
        dance_frames: clips[0].frames(),
        music_dim: m.dim,
        dance_dim: clips[0].width(),
        music: m.seqs,
        dance: clips.into_iter().map(|c| c.into_vec()).collect(),
    })
}

pub fn train_retrieval(run: &Run, a: TrainRetrievalArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    let (train, val, split) = match (&a.motion, &a.music) {
        (Some(mo), Some(mu)) => {
            rec.input(mo);
            rec.input(mu);
            let c = data_corpus(mo, mu)?;
            (c.clone(), c, "train")
        }
        _ => {
            let (t, v) = toy_corpus(&ToyCorpusSpec { pairs: a.pairs, seed: a.seed, ..ToyCorpusSpec::default() })?;
            (t, v, "validation")
        }
    };
    let cfg = a.preset.config(train.music_dim, train.dance_dim);
    let lrs = if a.lr_sweep { a.sweep_lrs.clone() } else { vec![a.lr] };
    if lrs.is_empty() || lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
        return Err(Error::Invalid(format!("learning rates must be positive, got {lrs:?}")).into());
    }
    let opts = RetrievalTrainOptions { epochs: a.epochs, batch: a.batch, lr: a.lr, seed: a.seed, ..Default::default() };
    let results = lr_sweep(&cfg, &train, &val, &lrs, &opts)?;
    for r in &results {
        eprintln!(
            "lr {:e}: R@5 {:.4} (null {:.4}, gallery {})",
            r.lr, r.report.r_at_5, r.report.null_r_at_5, r.report.gallery
        );
    }
    let sweep: Vec<_> = results.iter().map(|r| json!({ "lr": r.lr, "r_at_5": r.report.r_at_5 })).collect();
    // Highest R@5; ties keep the earlier learning rate.
    let best = results
        .into_iter()
        .reduce(|best, r| if r.report.r_at_5 > best.report.r_at_5 { r } else { best })
        .expect("at least one run");
    let (lr, log, report) = (&best.lr, &best.log, &best.report);
    bundles::save(&bundles::encoder_bundle(&best.encoder)?, &a.out)?;
    rec.output(&a.out);
    let sched = StepLr::standard(*lr);
    let details = json!({
        "chosen_lr": lr,
        "schedule": { "step_size": sched.step_size, "gamma": sched.gamma, "lr_epoch5_over_base": sched.lr_at(5) / sched.base_lr },
        "epochs": log,
        "query_direction": QUERY_DIRECTION,
        "split": split,
        "report": report,
        "sweep": sweep,
    });
    rec.finish(run, &a, Some(a.seed), details)?;
    println!(
        "lr {lr:e}: {split} R@5 {:.4} over a gallery of {} (chance {:.4})",
        report.r_at_5, report.gallery, report.null_r_at_5
    );
    Ok(())
}

/// A bundle that is either precomputed features or raw sequences.
enum Source {
    Features(Features),
    Dance { frames: usize, dim: usize, seqs: Vec<Vec<f64>> },
    Music { frames: usize, dim: usize, seqs: Vec<Vec<f64>> },
}

fn read_source(path: &Path) -> anyhow::Result<Source> {
    let b = bundles::load(path)?;
    let ctx = || format!("reading {}", path.display());
    if b.contains(FEATURES_ENTRY) {
        Ok(Source::Features(Features::from_bundle(&b).with_context(ctx)?))
    } else if b.contains(MOTION_ENTRY) {
        let clips = clips_from_bundle(&b).with_context(ctx)?;
        let (frames, dim) = (clips[0].frames(), clips[0].width());
        Ok(Source::Dance { frames, dim, seqs: clips.into_iter().map(|c| c.into_vec()).collect() })
    } else if b.contains(MUSIC_ENTRY) {
        let m = music_from_bundle(&b).with_context(ctx)?;
        Ok(Source::Music { frames: m.steps, dim: m.dim, seqs: m.seqs })
    } else {
        Err(Error::MissingEntry(format!("{FEATURES_ENTRY}, {MOTION_ENTRY} or {MUSIC_ENTRY} in {}", path.display()))
            .into())
    }
}

/// Embeds sources with one encoder: `--encoder`, else a seeded untrained
/// toy encoder sized to the inputs.
struct Embedder {
    enc: Option<DualEncoder<f32>>,
    trained: bool,
}

impl Embedder {
    fn new(encoder: Option<&Path>, seed: u64, sources: &[&Source]) -> anyhow::Result<Self> {
        if let Some(p) = encoder {
            let enc = bundles::load_encoder(p).with_context(|| format!("loading encoder {}", p.display()))?;
            return Ok(Self { enc: Some(enc), trained: true });
        }
        let dim = |want_music: bool| {
            sources.iter().find_map(|s| match (s, want_music) {
                (Source::Music { dim, .. }, true) | (Source::Dance { dim, .. }, false) => Some(*dim),
                _ => None,
            })
        };
        let (md, dd) = (dim(true), dim(false));
        if md.is_none() && dd.is_none() {
            return Ok(Self { enc: None, trained: false });
        }
        eprintln!("warning: no --encoder given; embedding with an untrained encoder (seed {seed})");
        let enc = DualEncoder::new(RetrievalConfig::toy(md.unwrap_or(1), dd.unwrap_or(1)), seed)?;
        Ok(Self { enc: Some(enc), trained: false })
    }

    fn features(&self, s: Source) -> anyhow::Result<Features> {
        let (m, frames, dim, seqs) = match s {
            Source::Features(f) => return Ok(f),
            Source::Dance { frames, dim, seqs } => (Modality::Dance, frames, dim, seqs),
            Source::Music { frames, dim, seqs } => (Modality::Music, frames, dim, seqs),
        };
        let enc = self.enc.as_ref().expect("encoder exists for raw sequences");
        let want = match m {
            Modality::Music => enc.cfg.music_dim,
            Modality::Dance => enc.cfg.dance_dim,
        };
        if dim != want {
            return Err(Error::Invalid(format!("{} width {dim}, but the encoder expects {want}", m.prefix())).into());
        }
        let data: Vec<Vec<f32>> = seqs.iter().map(|x| x.iter().map(|&v| v as f32).collect()).collect();
        let refs: Vec<(&[f32], usize)> = data.iter().map(|x| (x.as_slice(), frames)).collect();
        Ok(enc.embed(m, &refs)?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Generated dance: a features bundle or a motion bundle.
    #[arg(long, alias = "gen-features")]
    pub gen: PathBuf,
    /// Ground-truth dance: a features bundle or a motion bundle.
    #[arg(long, alias = "gt-features")]
    pub gt: PathBuf,
    /// Paired music: a features bundle or a music bundle.
    #[arg(long, alias = "music-features")]
    pub music: Option<PathBuf>,
    /// Trained retrieval encoder for raw inputs.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metric report (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn evaluate(run: &Run, a: EvaluateArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    rec.input(&a.gen);
    rec.input(&a.gt);
    let gen = read_source(&a.gen)?;
    let gt = read_source(&a.gt)?;
    let music = match &a.music {
        Some(p) => {
            rec.input(p);
            Some(read_source(p)?)
        }
        None => None,
    };
    if let Some(p) = &a.encoder {
        rec.input(p);
    }
    let mut all = vec![&gen, &gt];
    all.extend(music.as_ref());
    let embedder = Embedder::new(a.encoder.as_deref(), a.seed, &all)?;
    let (fg, ft) = (embedder.features(gen)?, embedder.features(gt)?);
    let fm = music.map(|m| embedder.features(m)).transpose()?;
    let mut warnings = Vec::new();
    match &fm {
        None => warnings.push("no music features: mm_dist, r_at_5, median_rank and mean_rank omitted".to_string()),
        Some(m) if m.rows() < 5 => warnings.push(format!("gallery of {} < 5: r_at_5 omitted", m.rows())),
        _ => {}
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let report = metrics(&fg, &ft, fm.as_ref())?;
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.out, text.clone() + "\n").map_err(|e| crate::manifest::io_error(&a.out, e))?;
    rec.output(&a.out);
    println!("{text}");
    let details = json!({
        "report": report,
        "gallery": fm.as_ref().map(|m| m.rows()),
        "query_direction": QUERY_DIRECTION,
        "feature_dim": fg.dim(),
        "trained_encoder": embedder.trained,
        "warnings": warnings,
    });
    rec.finish(run, &a, Some(a.seed), details)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    /// Motion or music bundle.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn embed(run: &Run, a: EmbedArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    rec.input(&a.input);
    if let Some(p) = &a.encoder {
        rec.input(p);
    }
    let src = read_source(&a.input)?;
    if matches!(src, Source::Features(_)) {
        return Err(Error::Invalid(format!("{} already holds features", a.input.display())).into());
    }
    let embedder = Embedder::new(a.encoder.as_deref(), a.seed, &[&src])?;
    let f = embedder.features(src)?;
    let mut b = TensorBundle::new();
    f.to_bundle(&mut b)?;
    bundles::save(&b, &a.out)?;
    rec.output(&a.out);
    rec.finish(
        run,
        &a,
        Some(a.seed),
        json!({ "rows": f.rows(), "dim": f.dim(), "trained_encoder": embedder.trained }),
    )?;
    println!("embedded {} sequences into {} dims", f.rows(), f.dim());
    Ok(())
}
