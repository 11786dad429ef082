//! Reconstruction losses on motion clips.
//!
//! Every L1 term is mean-reduced, so magnitudes do not scale with the number
//! of frames or joints. Sums accumulate in `f64` in index order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::clip::MotionClip;
use super::fk::forward_kinematics;
use super::skeleton::Skeleton;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// velocity weight
    pub alpha1: f64,
    /// acceleration weight
    pub alpha2: f64,
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        if !(alpha1 >= 0.0 && alpha2 >= 0.0) {
            return Err(Error::Invalid(format!("loss weights must be non-negative, got ({alpha1}, {alpha2})")));
        }
        Ok(Self { alpha1, alpha2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 0.5, alpha2: 0.25 }
    }
}

/// Forward difference along time: `out[t] = series[t + 1] - series[t]` for a
/// row-major `frames x width` series.
pub fn finite_difference(series: &[f64], frames: usize, width: usize) -> Result<Vec<f64>> {
    if frames < 2 {
        return Err(Error::InsufficientFrames { need: 2, got: frames });
    }
    if series.len() != frames * width {
        return Err(Error::shape("finite_difference", format!("{} values for {frames}x{width}", series.len())));
    }
    Ok(series[width..].iter().zip(&series[..series.len() - width]).map(|(next, cur)| next - cur).collect())
}

pub fn mean_abs_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Parameter-space L1 plus joint-position L1.
pub fn loss_kin(pred: &MotionClip, gt: &MotionClip, skel: &Skeleton) -> Result<f64> {
    pred.same_shape(gt)?;
    let params = mean_abs_error(pred.as_slice(), gt.as_slice());
    let flat = |c: &MotionClip| -> Result<Vec<f64>> {
        Ok(forward_kinematics(c, skel)?.into_iter().flatten().flatten().collect())
    };
    let joints = mean_abs_error(&flat(pred)?, &flat(gt)?);
    Ok(params + joints)
}

/// Weighted velocity and acceleration L1 on the pose parameters.
pub fn loss_dyn(pred: &MotionClip, gt: &MotionClip, w: LossWeights) -> Result<f64> {
    pred.same_shape(gt)?;
    let (t, width) = (pred.frames(), pred.width());
    if t < 3 {
        return Err(Error::InsufficientFrames { need: 3, got: t });
    }
    let vp = finite_difference(pred.as_slice(), t, width)?;
    let vg = finite_difference(gt.as_slice(), t, width)?;
    let ap = finite_difference(&vp, t - 1, width)?;
    let ag = finite_difference(&vg, t - 1, width)?;
    Ok(w.alpha1 * mean_abs_error(&vp, &vg) + w.alpha2 * mean_abs_error(&ap, &ag))
}

pub fn loss_rec(pred: &MotionClip, gt: &MotionClip, skel: &Skeleton, w: LossWeights) -> Result<f64> {
    Ok(loss_kin(pred, gt, skel)? + loss_dyn(pred, gt, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{gen_synthetic_motion, SyntheticCorpusSpec};

    fn corpus(n: usize, frames: usize) -> Vec<MotionClip> {
        gen_synthetic_motion(&SyntheticCorpusSpec { n_clips: n, frames, joint_count: 24, music_dim: 8, seed: 5 })
            .unwrap()
    }

    #[test]
    fn finite_difference_examples() {
        assert_eq!(finite_difference(&[0.0, 1.0, 3.0], 3, 1).unwrap(), vec![1.0, 2.0]);
        assert_eq!(finite_difference(&[4.0; 5], 5, 1).unwrap(), vec![0.0; 4]);
        let v = finite_difference(&[0.0, 1.0, 3.0, 6.0], 4, 1).unwrap();
        assert_eq!(finite_difference(&v, 3, 1).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(finite_difference(&[1.0], 1, 1), Err(Error::InsufficientFrames { .. })));
    }

    #[test]
    fn identical_clips_have_zero_loss() {
        let c = corpus(1, 20).remove(0);
        let skel = Skeleton::smpl_like();
        assert_eq!(loss_kin(&c, &c, &skel).unwrap(), 0.0);
        assert_eq!(loss_dyn(&c, &c, LossWeights::default()).unwrap(), 0.0);
        assert_eq!(loss_rec(&c, &c, &skel, LossWeights::default()).unwrap(), 0.0);
    }

    #[test]
    fn root_shift_closed_form() {
        let gt = corpus(1, 12).remove(0);
        let mut pred = gt.clone();
        for t in 0..pred.frames() {
            let mut r = pred.root(t);
            r[0] += 1.0;
            pred.set_root(t, r);
        }
        let skel = Skeleton::smpl_like();
        // parameter term: one of 147 columns off by 1; FK term: every x coordinate off by 1
        let want = 1.0 / 147.0 + 1.0 / 3.0;
        assert!((loss_kin(&pred, &gt, &skel).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn frame_permutation_invariance_of_kin() {
        let mut clips = corpus(2, 10);
        let (a, b) = (clips.remove(0), clips.remove(0));
        let skel = Skeleton::smpl_like();
        let perm = [3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
        let permute = |c: &MotionClip| {
            let data = perm.iter().flat_map(|&t| c.row(t).to_vec()).collect();
            MotionClip::new(c.frames(), c.joints(), data).unwrap()
        };
        let l0 = loss_kin(&a, &b, &skel).unwrap();
        let l1 = loss_kin(&permute(&a), &permute(&b), &skel).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
    }

    #[test]
    fn single_frame_perturbation_stencil() {
        let gt = MotionClip::rest(5, 1).unwrap();
        let mut pred = gt.clone();
        let delta = 0.3;
        pred.as_mut_slice()[2 * 9 + 4] += delta;
        let w = pred.width() as f64;
        let vel = LossWeights { alpha1: 1.0, alpha2: 0.0 };
        let acc = LossWeights { alpha1: 0.0, alpha2: 1.0 };
        // velocity: two entries of |delta| over 4 frames of width 9
        assert!((loss_dyn(&pred, &gt, vel).unwrap() - 2.0 * delta / (4.0 * w)).abs() < 1e-12);
        // acceleration: |delta|, |2 delta|, |delta| over 3 frames
        assert!((loss_dyn(&pred, &gt, acc).unwrap() - 4.0 * delta / (3.0 * w)).abs() < 1e-12);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha1, w.alpha2), (0.5, 0.25));
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn dyn_needs_three_frames() {
        let c = MotionClip::rest(2, 1).unwrap();
        assert!(matches!(loss_dyn(&c, &c, LossWeights::default()), Err(Error::InsufficientFrames { need: 3, .. })));
    }

    #[test]
    fn rec_decreases_along_segment() {
        let mut clips = corpus(2, 16);
        let (gt, start) = (clips.remove(0), clips.remove(0));
        let skel = Skeleton::smpl_like();
        let w = LossWeights::default();
        let lerp = |lambda: f64| {
            let data = start.as_slice().iter().zip(gt.as_slice()).map(|(s, g)| s + lambda * (g - s)).collect();
            MotionClip::new(gt.frames(), gt.joints(), data).unwrap()
        };
        let l: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&x| loss_rec(&lerp(x), &gt, &skel, w).unwrap()).collect();
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
        assert!(l[2].abs() < 1e-12);
    }
}
