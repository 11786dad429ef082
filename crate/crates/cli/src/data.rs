//! Corpus generation and the motion tokenizer commands.

use std::path::{Path, PathBuf};

use anyhow::Context;
use chorekit::fsq::{cur, tokens_from_bundle, tokens_to_bundle};
use chorekit::io::{gen_synthetic_motion, gen_synthetic_music, SyntheticCorpusSpec, TensorBundle};
use chorekit::motion::{clips_from_bundle, clips_to_bundle, loss_dyn, loss_kin, MotionClip};
use chorekit::nn::tokenizer::{train_tokenizer as fit, Tokenizer, TokenizerConfig, TrainOptions};
use chorekit::Error;
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::bundles::{self, music_to_bundle, Music};
use crate::manifest::Recorder;
use crate::Run;

pub const MOTION_FILE: &str = "motion.mtdb";
pub const MUSIC_FILE: &str = "music.mtdb";

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Output directory; receives motion.mtdb, music.mtdb and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    /// Frames per clip (a 12 s window at 30 fps by default).
    #[arg(long, default_value_t = 360)]
    pub frames: usize,
    #[arg(long, default_value_t = 24)]
    pub joints: usize,
    /// Width of the per-token-step music features.
    #[arg(long, default_value_t = 24)]
    pub music_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gen_data(run: &Run, a: GenDataArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    let spec = SyntheticCorpusSpec {
        n_clips: a.clips,
        frames: a.frames,
        joint_count: a.joints,
        music_dim: a.music_dim,
        seed: a.seed,
    };
    spec.validate()?;
    if a.clips == 0 || a.music_dim == 0 {
        return Err(Error::Invalid("--clips and --music-dim must be positive".into()).into());
    }
    let clips = gen_synthetic_motion(&spec)?;
    let music = Music { steps: spec.token_steps(), dim: a.music_dim, seqs: gen_synthetic_music(&clips, &spec)? };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (motion_path, music_path) = (a.out.join(MOTION_FILE), a.out.join(MUSIC_FILE));
    let mut mb = TensorBundle::new();
    clips_to_bundle(&clips, &mut mb)?;
    bundles::save(&mb, &motion_path)?;
    let mut sb = TensorBundle::new();
    music_to_bundle(&music, &mut sb)?;
    bundles::save(&sb, &music_path)?;
    rec.output(&motion_path);
    rec.output(&music_path);
    let details =
        json!({ "clips": a.clips, "frames": a.frames, "token_steps": music.steps, "pose_width": clips[0].width() });
    let run = Run { manifest: run.manifest.clone().or_else(|| Some(a.out.join("manifest.json"))), ..run.clone() };
    rec.finish(&run, &a, Some(a.seed), details)?;
    println!("wrote {} clips of {} frames to {}", a.clips, a.frames, a.out.display());
    Ok(())
}

pub fn load_clips(path: &Path) -> anyhow::Result<Vec<MotionClip>> {
    let clips =
        clips_from_bundle(&bundles::load(path)?).with_context(|| format!("reading motion from {}", path.display()))?;
    if clips.is_empty() {
        return Err(Error::Invalid(format!("{} holds no clips", path.display())).into());
    }
    Ok(clips)
}

/// Tokenizer from `--params`, else seeded random weights with the input
/// normalizer fitted to `clips` when given.
fn tokenizer(
    params: Option<&Path>,
    width: usize,
    joints: usize,
    seed: u64,
    clips: Option<&[MotionClip]>,
) -> anyhow::Result<Tokenizer<f32>> {
    if let Some(p) = params {
        let tok = bundles::load_tokenizer(p).with_context(|| format!("loading tokenizer {}", p.display()))?;
        if tok.cfg.joints != joints {
            return Err(
                Error::Invalid(format!("tokenizer expects {} joints, data has {joints}", tok.cfg.joints)).into()
            );
        }
        return Ok(tok);
    }
    eprintln!("warning: no --params given; using an untrained tokenizer (seed {seed})");
    let mut tok = Tokenizer::new(TokenizerConfig { width, joints, ..TokenizerConfig::toy() }, seed)?;
    if let Some(c) = clips {
        tok.fit_normalizer(c)?;
    }
    Ok(tok)
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub motion: PathBuf,
    /// Trained tokenizer bundle from train-tokenizer.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Width of the untrained tokenizer used without --params.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn tokenize(run: &Run, a: TokenizeArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    rec.input(&a.motion);
    if let Some(p) = &a.params {
        rec.input(p);
    }
    let clips = load_clips(&a.motion)?;
    let tok = tokenizer(a.params.as_deref(), a.width, clips[0].joints(), a.seed, Some(&clips))?;
    let seqs = clips.iter().map(|c| tok.tokenize(c)).collect::<chorekit::Result<Vec<_>>>()?;
    let mut b = TensorBundle::new();
    tokens_to_bundle(&seqs, &mut b)?;
    bundles::save(&b, &a.out)?;
    rec.output(&a.out);
    let hist = tok.usage(&clips)?;
    let ids = seqs.iter().flat_map(|(u, l)| u.iter().chain(l));
    let (lo, hi) = ids.fold((usize::MAX, 0), |(lo, hi), &id| (lo.min(id), hi.max(id)));
    let details = json!({
        "clips": clips.len(),
        "steps": seqs[0].0.len(),
        "min_id": lo,
        "max_id": hi,
        "cur_at_1": cur(&hist, &[1])[0],
    });
    rec.finish(run, &a, Some(a.seed), details)?;
    println!("tokenized {} clips into {} steps each", clips.len(), seqs[0].0.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Ground-truth motion; enables the per-clip loss report.
    #[arg(long)]
    pub motion: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 24)]
    pub joints: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct ClipLosses {
    clip: usize,
    l_kin: f64,
    l_dyn: f64,
    l_rec: f64,
}

pub fn reconstruct(run: &Run, a: ReconstructArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    rec.input(&a.tokens);
    let seqs = tokens_from_bundle(&bundles::load(&a.tokens)?)
        .with_context(|| format!("reading tokens from {}", a.tokens.display()))?;
    let gt = match &a.motion {
        Some(p) => {
            rec.input(p);
            Some(load_clips(p)?)
        }
        None => None,
    };
    let joints = gt.as_ref().map_or(a.joints, |c| c[0].joints());
    if let Some(p) = &a.params {
        rec.input(p);
    }
    let tok = tokenizer(a.params.as_deref(), a.width, joints, a.seed, None)?;
    let recon = seqs.iter().map(|(u, l)| tok.detokenize(u, l)).collect::<chorekit::Result<Vec<_>>>()?;
    let mut b = TensorBundle::new();
    clips_to_bundle(&recon, &mut b)?;
    bundles::save(&b, &a.out)?;
    rec.output(&a.out);
    let mut details = json!({ "clips": recon.len(), "frames": recon[0].frames() });
    if let Some(gt) = &gt {
        if gt.len() != recon.len() {
            return Err(
                Error::Invalid(format!("{} token sequences for {} ground-truth clips", recon.len(), gt.len())).into()
            );
        }
        let w = tok.cfg.weights;
        let losses = recon
            .iter()
            .zip(gt)
            .enumerate()
            .map(|(i, (p, g))| {
                let l_kin = loss_kin(p, g, &tok.skeleton)?;
                let l_dyn = loss_dyn(p, g, w)?;
                Ok(ClipLosses { clip: i, l_kin, l_dyn, l_rec: l_kin + l_dyn })
            })
            .collect::<chorekit::Result<Vec<_>>>()?;
        if losses.iter().any(|l| !l.l_rec.is_finite()) {
            return Err(Error::Numerical("reconstruction loss is not finite".into()).into());
        }
        let mean = losses.iter().map(|l| l.l_rec).sum::<f64>() / losses.len() as f64;
        println!("{}", serde_json::to_string_pretty(&json!({ "clips": losses, "mean_l_rec": mean }))?);
        details["losses"] = serde_json::to_value(&losses)?;
        details["mean_l_rec"] = json!(mean);
    }
    rec.finish(run, &a, Some(a.seed), details)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainTokenizerArgs {
    #[arg(long)]
    pub motion: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train once per --sweep-lr value and keep the lowest final L_rec.
    #[arg(long)]
    pub lr_sweep: bool,
    #[arg(long = "sweep-lr", default_values_t = [1e-2, 1e-3, 1e-4])]
    pub sweep_lrs: Vec<f64>,
}

struct Trained {
    lr: f64,
    tok: Tokenizer<f32>,
    history: Vec<f64>,
    final_rec: f64,
}

pub fn train_tokenizer(run: &Run, a: TrainTokenizerArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    rec.input(&a.motion);
    let clips = load_clips(&a.motion)?;
    let cfg = TokenizerConfig { width: a.width, joints: clips[0].joints(), ..TokenizerConfig::toy() };
    let mut base = Tokenizer::<f32>::new(cfg, a.seed)?;
    base.fit_normalizer(&clips)?;
    let initial_rec = base.mean_rec(&clips)?;
    let cur_before = cur(&base.usage(&clips)?, &[1])[0];
    let lrs = if a.lr_sweep { a.sweep_lrs.clone() } else { vec![a.lr] };
    if lrs.is_empty() || lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
        return Err(Error::Invalid(format!("learning rates must be positive, got {lrs:?}")).into());
    }
    let mut runs = Vec::with_capacity(lrs.len());
    for &lr in &lrs {
        let mut tok = base.clone();
        let opts = TrainOptions { steps: a.steps, batch: a.batch, lr, seed: a.seed, ..TrainOptions::default() };
        let history = fit(&mut tok, &clips, &opts)?;
        let final_rec = tok.mean_rec(&clips)?;
        if !final_rec.is_finite() {
            return Err(Error::Numerical(format!("training at lr {lr} diverged")).into());
        }
        if a.lr_sweep {
            eprintln!("lr {lr:e}: L_rec {initial_rec:.4} -> {final_rec:.4}");
        }
        runs.push(Trained { lr, tok, history, final_rec });
    }
    let sweep: Vec<_> = runs.iter().map(|r| json!({ "lr": r.lr, "final_l_rec": r.final_rec })).collect();
    let best = runs.into_iter().min_by(|x, y| x.final_rec.total_cmp(&y.final_rec)).expect("at least one run");
    let cur_after = cur(&best.tok.usage(&clips)?, &[1])[0];
    bundles::save(&bundles::tokenizer_bundle(&best.tok)?, &a.out)?;
    rec.output(&a.out);
    let details = json!({
        "chosen_lr": best.lr,
        "initial_l_rec": initial_rec,
        "final_l_rec": best.final_rec,
        "reduction": 1.0 - best.final_rec / initial_rec,
        "cur_at_1_untrained": cur_before,
        "cur_at_1_trained": cur_after,
        "sweep": sweep,
        "step_losses": best.history,
    });
    rec.finish(run, &a, Some(a.seed), details)?;
    println!(
        "lr {:e}: L_rec {initial_rec:.4} -> {:.4}, CUR@1 {cur_before:.4} -> {cur_after:.4}",
        best.lr, best.final_rec
    );
    Ok(())
}
