//! Kinematic tabletop world: a free-flying gripper, one box, a shelf or a
//! push target, grasping by proximity and quasi-static pushing.

mod pose;
mod push;
mod task;
mod world;

pub use pose::{normalize_quaternion, quaternion_angle, slerp, wrap_angle, yaw_quaternion, Pose};
pub use push::{push_displacement, PushDisplacement};
pub use task::{tick, Bounds, PushGains, Shelf, TargetRegion, TaskKind, TaskSpec, CONTROL_HZ, TICK_HZ};
pub use world::{Attachment, EnvState, GripperState, GRIPPER_DIM, OBS_DIM};
