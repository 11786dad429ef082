use num_traits::Float;

use crate::error::{Error, Result};

use super::clip::MotionClip;
use super::rotation::{gram_schmidt, matmul3, matvec3, GramSchmidt, Mat3, Vec3};
use super::skeleton::Skeleton;

/// Per-frame forward-kinematics state kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct FrameFk<T> {
    pub local: Vec<GramSchmidt<T>>,
    pub global: Vec<Mat3<T>>,
    pub positions: Vec<Vec3<T>>,
}

pub(crate) fn fk_frame<T: Float>(row: &[T], skel: &Skeleton) -> Result<FrameFk<T>> {
    let joints = skel.joint_count();
    let mut local = Vec::with_capacity(joints);
    let mut global: Vec<Mat3<T>> = Vec::with_capacity(joints);
    let mut positions: Vec<Vec3<T>> = Vec::with_capacity(joints);
    for j in 0..joints {
        let s = &row[3 + 6 * j..3 + 6 * j + 6];
        let gs = gram_schmidt(&[s[0], s[1], s[2]], &[s[3], s[4], s[5]])
            .map_err(|e| Error::DegenerateRotation(format!("joint {j}: {e}")))?;
        let r = gs.matrix();
        match skel.parent(j) {
            None => {
                positions.push([row[0], row[1], row[2]]);
                global.push(r);
            }
            Some(p) => {
                let o = skel.offset(j).map(|v| T::from(v).unwrap());
                let d = matvec3(&global[p], &o);
                positions.push([positions[p][0] + d[0], positions[p][1] + d[1], positions[p][2] + d[2]]);
                global.push(matmul3(&global[p], &r));
            }
        }
        local.push(gs);
    }
    Ok(FrameFk { local, global, positions })
}

/// Gradient of a frame's pose row given gradients on the joint positions.
pub(crate) fn fk_frame_backward<T: Float>(fk: &FrameFk<T>, skel: &Skeleton, grad_pos: &[Vec3<T>], out: &mut [T]) {
    let joints = skel.joint_count();
    let zero = T::zero();
    let mut g_pos = grad_pos.to_vec();
    let mut g_glob = vec![[[zero; 3]; 3]; joints];
    for j in (0..joints).rev() {
        let r = fk.local[j].matrix();
        let g_local = match skel.parent(j) {
            None => {
                out[0] = out[0] + g_pos[j][0];
                out[1] = out[1] + g_pos[j][1];
                out[2] = out[2] + g_pos[j][2];
                g_glob[j]
            }
            Some(p) => {
                let o = skel.offset(j).map(|v| T::from(v).unwrap());
                let gp = g_pos[j];
                let gg = g_glob[j];
                let gm = &fk.global[p];
                let mut g_local = [[zero; 3]; 3];
                for a in 0..3 {
                    g_pos[p][a] = g_pos[p][a] + gp[a];
                    for b in 0..3 {
                        // d/dG_p of (G_p o) and of (G_p R)
                        let mut acc = gp[a] * o[b];
                        for c in 0..3 {
                            acc = acc + gg[a][c] * r[b][c];
                            g_local[a][b] = g_local[a][b] + gm[c][a] * gg[c][b];
                        }
                        g_glob[p][a][b] = g_glob[p][a][b] + acc;
                    }
                }
                g_local
            }
        };
        let (ga, gb) = fk.local[j].backward(&g_local);
        let at = 3 + 6 * j;
        for k in 0..3 {
            out[at + k] = out[at + k] + ga[k];
            out[at + 3 + k] = out[at + 3 + k] + gb[k];
        }
    }
}

/// Joint positions for every frame, `frames x joints` points in meters.
pub fn forward_kinematics(clip: &MotionClip, skel: &Skeleton) -> Result<Vec<Vec<[f64; 3]>>> {
    if clip.joints() != skel.joint_count() {
        return Err(Error::shape(
            "forward_kinematics",
            format!("clip has {} joints, skeleton {}", clip.joints(), skel.joint_count()),
        ));
    }
    (0..clip.frames()).map(|t| fk_frame(clip.row(t), skel).map(|f| f.positions)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::Rotation6D;

    #[test]
    fn rest_pose_sums_offsets() {
        let skel = Skeleton::smpl_like();
        let clip = MotionClip::rest(2, 24).unwrap();
        let pos = forward_kinematics(&clip, &skel).unwrap();
        let rest = skel.rest_positions();
        for t in 0..2 {
            for j in 0..24 {
                for k in 0..3 {
                    assert!((pos[t][j][k] - rest[j][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn root_rotation_about_z() {
        let skel = Skeleton::chain(2);
        let mut clip = MotionClip::rest(1, 2).unwrap();
        clip.set_root(0, [0.5, -1.0, 2.0]);
        // 90 degrees about z: x -> y, y -> -x
        clip.set_rotation(0, 0, Rotation6D { a: [0.0, 1.0, 0.0], b: [-1.0, 0.0, 0.0] });
        let pos = forward_kinematics(&clip, &skel).unwrap();
        let want = [0.5, 0.0, 2.0];
        for k in 0..3 {
            assert!((pos[0][1][k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_count_mismatch() {
        let clip = MotionClip::rest(1, 3).unwrap();
        assert!(forward_kinematics(&clip, &Skeleton::chain(2)).is_err());
    }

    #[test]
    fn degenerate_rotation_propagates() {
        let mut clip = MotionClip::rest(1, 2).unwrap();
        clip.set_rotation(0, 1, Rotation6D { a: [0.0; 3], b: [0.0, 1.0, 0.0] });
        assert!(matches!(forward_kinematics(&clip, &Skeleton::chain(2)), Err(Error::DegenerateRotation(_))));
    }
}
