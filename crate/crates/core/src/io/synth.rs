//! Seeded synthetic motion and music corpora.
//!
//! Each rotation channel is the identity 6D value plus a sum of one to three
//! sinusoids whose amplitudes add up to at most [`ROT_AMPLITUDE_MAX`] and
//! whose angular frequencies stay below [`ROT_OMEGA_MAX`] rad/frame, so the
//! frame-to-frame change of any rotation parameter is bounded by
//! `ROT_AMPLITUDE_MAX * ROT_OMEGA_MAX`. The root translation is a smoothed
//! random walk on the ground plane with a small vertical bounce.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{pose_width, MotionClip, Rotation6D};

use super::rng::SeededRng;

pub const ROT_AMPLITUDE_MAX: f64 = 0.3;
/// Two cycles per second at 30 fps.
pub const ROT_OMEGA_MAX: f64 = TAU * 2.0 / 30.0;
const ROT_OMEGA_MIN: f64 = TAU * 0.25 / 30.0;
const ROOT_HEIGHT: f64 = 0.9;

/// Frames per token step of the motion tokenizer (three stride-2 stages).
pub const TOKEN_DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_clips: usize,
    pub frames: usize,
    pub joint_count: usize,
    pub music_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self { n_clips: 1, frames: 360, joint_count: 24, music_dim: 1024, seed: 0 }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InsufficientFrames { need: 2, got: self.frames });
        }
        if self.joint_count < 1 {
            return Err(Error::Invalid("joint_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn token_steps(&self) -> usize {
        self.frames.div_ceil(TOKEN_DOWNSAMPLE)
    }
}

pub fn gen_synthetic_motion(spec: &SyntheticCorpusSpec) -> Result<Vec<MotionClip>> {
    spec.validate()?;
    let base = SeededRng::new(spec.seed);
    (0..spec.n_clips).map(|i| motion_clip(spec, &mut base.fork(i as u64))).collect()
}

struct Wave {
    amp: f64,
    omega: f64,
    phase: f64,
}

fn channel_waves(rng: &mut SeededRng) -> Vec<Wave> {
    let count = 1 + rng.below(3) as usize;
    let total = rng.uniform(0.05, ROT_AMPLITUDE_MAX);
    let weights: Vec<f64> = (0..count).map(|_| rng.uniform(0.1, 1.0)).collect();
    let sum: f64 = weights.iter().sum();
    weights
        .into_iter()
        .map(|w| Wave {
            amp: total * w / sum,
            omega: rng.uniform(ROT_OMEGA_MIN, ROT_OMEGA_MAX),
            phase: rng.uniform(0.0, TAU),
        })
        .collect()
}

fn motion_clip(spec: &SyntheticCorpusSpec, rng: &mut SeededRng) -> Result<MotionClip> {
    let (frames, joints) = (spec.frames, spec.joint_count);
    let width = pose_width(joints);
    let mut data = vec![0.0; frames * width];

    let identity = Rotation6D::IDENTITY.to_array();
    for j in 0..joints {
        for (k, &rest) in identity.iter().enumerate() {
            let waves = channel_waves(rng);
            let col = 3 + 6 * j + k;
            for t in 0..frames {
                let tf = t as f64;
                data[t * width + col] =
                    rest + waves.iter().map(|w| w.amp * (w.omega * tf + w.phase).sin()).sum::<f64>();
            }
        }
    }

    let mut pos = [rng.uniform(-0.5, 0.5), ROOT_HEIGHT, rng.uniform(-0.5, 0.5)];
    let mut vel = [0.0f64; 2];
    let bounce = Wave {
        amp: rng.uniform(0.0, 0.04),
        omega: rng.uniform(ROT_OMEGA_MIN, ROT_OMEGA_MAX),
        phase: rng.uniform(0.0, TAU),
    };
    for t in 0..frames {
        vel[0] = 0.95 * vel[0] + 0.05 * 0.02 * rng.normal();
        vel[1] = 0.95 * vel[1] + 0.05 * 0.02 * rng.normal();
        pos[0] += vel[0];
        pos[2] += vel[1];
        pos[1] = ROOT_HEIGHT + bounce.amp * (bounce.omega * t as f64 + bounce.phase).sin();
        data[t * width..t * width + 3].copy_from_slice(&pos);
    }
    MotionClip::new(frames, joints, data)
}

/// Music features paired with `clips`: per token step, a fixed seeded linear
/// image of the mean pose over that step's frames plus Gaussian noise.
/// Returns one row-major `token_steps x music_dim` matrix per clip.
pub fn gen_synthetic_music(clips: &[MotionClip], spec: &SyntheticCorpusSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let Some(first) = clips.first() else { return Ok(Vec::new()) };
    let width = first.width();
    let mut rng = SeededRng::new(spec.seed).fork(u64::MAX);
    let scale = 1.0 / (width as f64).sqrt();
    let projection: Vec<f64> = (0..spec.music_dim * width).map(|_| rng.normal() * scale * 4.0).collect();
    let rest = MotionClip::rest(1, first.joints())?;

    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            first.same_shape(clip)?;
            let mut noise = rng.fork(i as u64);
            let steps = clip.frames().div_ceil(TOKEN_DOWNSAMPLE);
            let mut out = Vec::with_capacity(steps * spec.music_dim);
            let mut mean = vec![0.0; width];
            for s in 0..steps {
                let (t0, t1) = (s * TOKEN_DOWNSAMPLE, ((s + 1) * TOKEN_DOWNSAMPLE).min(clip.frames()));
                mean.iter_mut().for_each(|m| *m = 0.0);
                for t in t0..t1 {
                    for ((m, v), r) in mean.iter_mut().zip(clip.row(t)).zip(rest.row(0)) {
                        *m += (v - r) / (t1 - t0) as f64;
                    }
                }
                for row in projection.chunks_exact(width) {
                    let dot: f64 = row.iter().zip(&mean).map(|(p, m)| p * m).sum();
                    out.push(dot + 0.1 * noise.normal());
                }
            }
            Ok(out)
        })
        .collect()
}

/// Windows `[i * stride, i * stride + window)` that fit inside `length`.
pub fn sliding_windows(length: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || stride == 0 {
        return Err(Error::Invalid(format!("window ({window}) and stride ({stride}) must be positive")));
    }
    if window > length {
        return Ok(Vec::new());
    }
    Ok((0..=(length - window) / stride).map(|i| (i * stride, i * stride + window)).collect())
}
