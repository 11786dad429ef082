use crate::error::{Error, Result};
use crate::io::TensorBundle;

use super::rotation::Rotation6D;

/// A dance sequence stored as `frames x (3 + 6 * joints)` row-major values:
/// root translation followed by one 6D rotation per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    frames: usize,
    joints: usize,
    data: Vec<f64>,
}

pub const MOTION_ENTRY: &str = "motion";

pub fn pose_width(joints: usize) -> usize {
    3 + 6 * joints
}

impl MotionClip {
    pub fn new(frames: usize, joints: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InsufficientFrames { need: 1, got: 0 });
        }
        if joints == 0 {
            return Err(Error::Invalid("clip needs at least one joint".into()));
        }
        if data.len() != frames * pose_width(joints) {
            return Err(Error::Invalid(format!(
                "clip data has {} values, expected {frames} x {}",
                data.len(),
                pose_width(joints)
            )));
        }
        Ok(Self { frames, joints, data })
    }

    /// Rest pose (identity rotations) at the origin.
    pub fn rest(frames: usize, joints: usize) -> Result<Self> {
        let mut row = vec![0.0; pose_width(joints)];
        for j in 0..joints {
            row[3 + 6 * j..3 + 6 * j + 6].copy_from_slice(&Rotation6D::IDENTITY.to_array());
        }
        Self::new(frames, joints, row.repeat(frames))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn width(&self) -> usize {
        pose_width(self.joints)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn root(&self, t: usize) -> [f64; 3] {
        let r = self.row(t);
        [r[0], r[1], r[2]]
    }

    pub fn rotation(&self, t: usize, joint: usize) -> Rotation6D {
        Rotation6D::from_slice(&self.row(t)[3 + 6 * joint..])
    }

    pub fn set_root(&mut self, t: usize, tau: [f64; 3]) {
        let w = self.width();
        self.data[t * w..t * w + 3].copy_from_slice(&tau);
    }

    pub fn set_rotation(&mut self, t: usize, joint: usize, r: Rotation6D) {
        let at = t * self.width() + 3 + 6 * joint;
        self.data[at..at + 6].copy_from_slice(&r.to_array());
    }

    /// Frames `[start, end)` as a new clip.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::OutOfRange(format!("window [{start}, {end}) of a {}-frame clip", self.frames)));
        }
        let w = self.width();
        Self::new(end - start, self.joints, self.data[start * w..end * w].to_vec())
    }

    pub fn same_shape(&self, other: &MotionClip) -> Result<()> {
        if self.frames != other.frames || self.joints != other.joints {
            return Err(Error::shape(
                "motion",
                format!("{}x{} joints vs {}x{} joints", self.frames, self.joints, other.frames, other.joints),
            ));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Stores clips under `motion`: `[T, W]` for one clip, `[N, T, W]` for several.
/// All clips must share frame and joint counts.
pub fn clips_to_bundle(clips: &[MotionClip], bundle: &mut TensorBundle) -> Result<()> {
    let first = clips.first().ok_or_else(|| Error::Invalid("no clips to store".into()))?;
    for c in clips {
        first.same_shape(c)?;
    }
    let data: Vec<f32> = clips.iter().flat_map(|c| c.to_f32()).collect();
    if clips.len() == 1 {
        bundle.push_f32(MOTION_ENTRY, &[first.frames, first.width()], &data)
    } else {
        bundle.push_f32(MOTION_ENTRY, &[clips.len(), first.frames, first.width()], &data)
    }
}

pub fn clips_from_bundle(bundle: &TensorBundle) -> Result<Vec<MotionClip>> {
    let (shape, data) = bundle.f32(MOTION_ENTRY)?;
    let (n, t, w) = match shape.as_slice() {
        [t, w] => (1, *t, *w),
        [n, t, w] => (*n, *t, *w),
        _ => return Err(Error::Format(format!("`motion` must be rank 2 or 3, got {shape:?}"))),
    };
    if w < 9 || (w - 3) % 6 != 0 {
        return Err(Error::Format(format!("pose width {w} is not 3 + 6 * joints")));
    }
    let joints = (w - 3) / 6;
    data.chunks_exact(t * w)
        .take(n)
        .map(|c| MotionClip::new(t, joints, c.iter().map(|&v| v as f64).collect()))
        .collect()
}
