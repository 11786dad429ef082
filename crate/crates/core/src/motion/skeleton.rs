use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic tree with per-joint rest offsets (meters, expressed in the
/// parent's frame). Joints are topologically ordered: `parent[j] < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

/// SMPL-style 24-joint topology.
pub const SMPL_PARENTS: [i32; 24] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

/// Synthetic rest offsets for the default skeleton, roughly human-proportioned.
pub const DEFAULT_OFFSETS: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],       // pelvis
    [0.06, -0.09, 0.0],    // left hip
    [-0.06, -0.09, 0.0],   // right hip
    [0.0, 0.11, 0.0],      // spine 1
    [0.04, -0.38, 0.0],    // left knee
    [-0.04, -0.38, 0.0],   // right knee
    [0.0, 0.14, 0.0],      // spine 2
    [0.0, -0.40, -0.04],   // left ankle
    [0.0, -0.40, -0.04],   // right ankle
    [0.0, 0.06, 0.02],     // spine 3
    [0.02, -0.06, 0.12],   // left foot
    [-0.02, -0.06, 0.12],  // right foot
    [0.0, 0.21, -0.03],    // neck
    [0.08, 0.12, -0.01],   // left collar
    [-0.08, 0.12, -0.01],  // right collar
    [0.0, 0.09, 0.05],     // head
    [0.12, 0.04, -0.02],   // left shoulder
    [-0.12, 0.04, -0.02],  // right shoulder
    [0.26, 0.0, -0.01],    // left elbow
    [-0.26, 0.0, -0.01],   // right elbow
    [0.25, 0.01, 0.0],     // left wrist
    [-0.25, 0.01, 0.0],    // right wrist
    [0.08, -0.01, -0.01],  // left hand
    [-0.08, -0.01, -0.01], // right hand
];

/// Joints driven by the lower-body token stream (pelvis, legs, feet).
pub const LOWER_BODY_JOINTS: [usize; 9] = [0, 1, 2, 4, 5, 7, 8, 10, 11];

impl Skeleton {
    pub fn new(parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::Invalid("skeleton needs at least one joint".into()));
        }
        if parents.len() != offsets.len() {
            return Err(Error::Invalid(format!("{} parents but {} offsets", parents.len(), offsets.len())));
        }
        if parents[0].is_some() {
            return Err(Error::Invalid("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return Err(Error::Invalid(format!("joint {j} needs a parent with a smaller index, got {p:?}"))),
            }
        }
        Ok(Self { parents, offsets })
    }

    pub fn smpl_like() -> Self {
        let parents = SMPL_PARENTS.iter().map(|&p| usize::try_from(p).ok()).collect();
        Self::new(parents, DEFAULT_OFFSETS.to_vec()).expect("default skeleton is valid")
    }

    /// A straight chain along +x with unit offsets.
    pub fn chain(joints: usize) -> Self {
        let parents = (0..joints).map(|j| j.checked_sub(1)).collect();
        let offsets = (0..joints).map(|j| if j == 0 { [0.0; 3] } else { [1.0, 0.0, 0.0] }).collect();
        Self::new(parents, offsets).expect("chain is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn offset(&self, joint: usize) -> [f64; 3] {
        self.offsets[joint]
    }

    pub fn offsets(&self) -> &[[f64; 3]] {
        &self.offsets
    }

    /// Rest-pose position of every joint relative to the root.
    pub fn rest_positions(&self) -> Vec<[f64; 3]> {
        let mut pos = vec![[0.0; 3]; self.joint_count()];
        for j in 1..self.joint_count() {
            let p = self.parents[j].unwrap();
            for k in 0..3 {
                pos[j][k] = pos[p][k] + self.offsets[j][k];
            }
        }
        pos
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::smpl_like()
    }
}

/// Column split of the flattened `[tau, joint0(6), ...]` pose vector into the
/// lower- and upper-body streams. The root translation travels with the
/// lower body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyPartition {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

impl BodyPartition {
    pub fn new(joint_count: usize, lower_joints: &[usize]) -> Result<Self> {
        if let Some(&j) = lower_joints.iter().find(|&&j| j >= joint_count) {
            return Err(Error::OutOfRange(format!("lower-body joint {j} >= {joint_count}")));
        }
        let mut lower = vec![0, 1, 2];
        let mut upper = Vec::new();
        for j in 0..joint_count {
            let cols = (3 + 6 * j)..(3 + 6 * j + 6);
            if lower_joints.contains(&j) {
                lower.extend(cols);
            } else {
                upper.extend(cols);
            }
        }
        Ok(Self { lower, upper })
    }

    /// Default split for a skeleton: SMPL legs when it has 24 joints, otherwise
    /// the first half of the joints go to the lower body.
    pub fn for_joints(joint_count: usize) -> Self {
        if joint_count == 24 {
            Self::new(24, &LOWER_BODY_JOINTS).unwrap()
        } else {
            let lower: Vec<usize> = (0..joint_count.div_ceil(2)).collect();
            Self::new(joint_count, &lower).unwrap()
        }
    }

    pub fn width(&self) -> usize {
        self.lower.len() + self.upper.len()
    }

    /// Permutation taking `[lower | upper]` columns back to pose layout.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.width()];
        for (i, &c) in self.lower.iter().chain(&self.upper).enumerate() {
            inv[c] = i;
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skeleton_is_a_tree() {
        let s = Skeleton::smpl_like();
        assert_eq!(s.joint_count(), 24);
        for j in 1..24 {
            assert!(s.parent(j).unwrap() < j);
        }
    }

    #[test]
    fn rejects_forward_parent() {
        assert!(Skeleton::new(vec![None, Some(2), Some(0)], vec![[0.0; 3]; 3]).is_err());
        assert!(Skeleton::new(vec![Some(0)], vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn partition_widths() {
        let p = BodyPartition::for_joints(24);
        assert_eq!(p.lower.len(), 57);
        assert_eq!(p.upper.len(), 90);
        let inv = p.inverse();
        let merged: Vec<usize> = p.lower.iter().chain(&p.upper).copied().collect();
        for c in 0..147 {
            assert_eq!(merged[inv[c]], c);
        }
    }
}
