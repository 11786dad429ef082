//! Pose representation, forward kinematics and reconstruction losses.

mod clip;
mod fk;
mod loss;
mod rotation;
mod skeleton;

pub use clip::{clips_from_bundle, clips_to_bundle, pose_width, MotionClip, MOTION_ENTRY};
pub use fk::forward_kinematics;
pub(crate) use fk::{fk_frame, fk_frame_backward};
pub use loss::{finite_difference, loss_dyn, loss_kin, loss_rec, mean_abs_error, LossWeights};
pub use rotation::{rot6d_to_matrix, Mat3, Rotation6D, Vec3, DEGENERATE_EPS};
pub use skeleton::{BodyPartition, Skeleton, DEFAULT_OFFSETS, LOWER_BODY_JOINTS, SMPL_PARENTS};
