//! Token generation and mask inspection.

use std::path::PathBuf;

use anyhow::Context;
use chorekit::fsq::tokens_to_bundle;
use chorekit::io::TensorBundle;
use chorekit::seqgen::{build_swa_mask, HybridConfig, HybridModel, Sampling};
use chorekit::Error;
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::bundles::{self, music_from_bundle};
use crate::manifest::Recorder;
use crate::Run;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Full,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub music: PathBuf,
    /// Genre class in [0, 16); omit for genre-agnostic generation.
    #[arg(long)]
    pub genre: Option<usize>,
    /// Generator bundle; without it the weights are seeded random.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Architecture of the random generator used without --params.
    #[arg(long, value_enum, default_value_t = Preset::Small)]
    pub preset: Preset,
    #[arg(long, value_enum, default_value_t = Mode::Argmax)]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the random generator's weights here.
    #[arg(long)]
    pub save_params: Option<PathBuf>,
}

pub fn generate(run: &Run, a: GenerateArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    rec.input(&a.music);
    let music = music_from_bundle(&bundles::load(&a.music)?)
        .with_context(|| format!("reading music from {}", a.music.display()))?;
    let model = match &a.params {
        Some(p) => {
            rec.input(p);
            bundles::load_generator(p).with_context(|| format!("loading generator {}", p.display()))?
        }
        None => {
            let base = match a.preset {
                Preset::Small => HybridConfig::small(),
                Preset::Full => HybridConfig::full(),
            };
            HybridModel::new(HybridConfig { music_dim: music.dim, ..base }, a.seed)?
        }
    };
    if let Some(g) = a.genre {
        if g >= model.cfg.genres {
            return Err(Error::OutOfRange(format!("genre {g} outside [0, {})", model.cfg.genres)).into());
        }
    }
    if music.dim != model.cfg.music_dim {
        return Err(Error::Invalid(format!(
            "music width {} but the generator expects {}",
            music.dim, model.cfg.music_dim
        ))
        .into());
    }
    if a.mode == Mode::Sample && !(a.temperature > 0.0 && a.temperature.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be positive, got {}", a.temperature)).into());
    }
    let long = music.steps > model.cfg.context;
    if long {
        eprintln!("long mode: {} steps exceed the {}-step context", music.steps, model.cfg.context);
    }
    let seqs: Vec<(Vec<usize>, Vec<usize>)> = music
        .seqs
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let sampling = match a.mode {
                Mode::Argmax => Sampling::Argmax,
                Mode::Sample => Sampling::Temperature { tau: a.temperature, seed: a.seed.wrapping_add(i as u64) },
            };
            let x: Vec<f32> = m.iter().map(|&v| v as f32).collect();
            model.generate(&x, a.genre, sampling).map(|p| (p.upper, p.lower))
        })
        .collect::<chorekit::Result<_>>()?;
    let mut b = TensorBundle::new();
    tokens_to_bundle(&seqs, &mut b)?;
    bundles::save(&b, &a.out)?;
    rec.output(&a.out);
    if let (Some(p), None) = (&a.save_params, &a.params) {
        bundles::save(&bundles::generator_bundle(&model)?, p)?;
        rec.output(p);
    }
    let details = json!({
        "inference_mode": if long { "long" } else { "short" },
        "steps": music.steps,
        "context": model.cfg.context,
        "clips": seqs.len(),
        "genre": a.genre,
        "parameters": model.params.numel(),
    });
    rec.finish(run, &a, Some(a.seed), details)?;
    println!(
        "generated {} sequences of {} steps ({} mode)",
        seqs.len(),
        music.steps,
        if long { "long" } else { "short" }
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct MasksDumpArgs {
    /// Sequence length.
    #[arg(long, default_value_t = 128)]
    pub len: usize,
    /// Window step S.
    #[arg(long, default_value_t = 30)]
    pub step: usize,
    /// Window stride R.
    #[arg(long, default_value_t = 15)]
    pub stride: usize,
    /// Write the grid here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn masks_dump(run: &Run, a: MasksDumpArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start();
    let mask = build_swa_mask(a.len, a.step, a.stride)?;
    let grid = mask.to_grid();
    match &a.out {
        Some(p) => {
            std::fs::write(p, &grid).map_err(|e| crate::manifest::io_error(p, e))?;
            rec.output(p);
        }
        None => print!("{grid}"),
    }
    let widths: Vec<usize> = (0..a.len).map(|t| mask.width(t)).collect();
    let details =
        json!({ "causal": mask.is_causal(), "min_width": widths.iter().min(), "max_width": widths.iter().max() });
    rec.finish(run, &a, None, details)?;
    Ok(())
}
