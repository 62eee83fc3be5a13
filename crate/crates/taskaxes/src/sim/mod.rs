//! Quasi-static manipulation simulator: a 7-DoF arm tracked by
//! damped-least-squares IK over three articulated task scenes.
//!
//! Observation layout (all tasks share an 18-value prefix):
//!
//! | slice    | meaning                                  |
//! |----------|------------------------------------------|
//! | `0..7`   | joint angles                             |
//! | `7`      | gripper width                            |
//! | `8..11`  | end-effector position                    |
//! | `11..15` | end-effector quaternion (w, x, y, z)     |
//! | `15..18` | contact force                            |
//!
//! Task-specific suffixes: button — box center xy + half height, button top
//! center, plunger depth (total 25); block — block position, quaternion,
//! dimensions (28); door — handle base point, hinge angle (22).

pub mod arm;
pub mod env;
pub mod scene;

pub use arm::{fk, ik_track, jacobian, IkResult, GRIPPER_MAX_WIDTH, Q_HOME};
pub use env::{
    check_success, reward_for, EEState, EnvConfig, StepInfo, StepResult, TaskEnv, TaskMetrics,
    BLOCK_SUCCESS_TOL, BUTTON_SUCCESS_J, DOOR_LOCK_THETA, DOOR_SUCCESS_PHI,
};
pub use scene::{
    Body, JointState, Pose, SceneModel, Shape, TaskFamily, Variation,
};
