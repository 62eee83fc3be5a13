//! Object-centric task-axes controllers with visually bootstrapped parameters.
//!
//! The crate implements a self-contained manipulation-learning stack:
//!
//! * [`geom`] — minimal 3D kernel: axis projections, angle-axis deltas,
//!   pinhole back-projection.
//! * [`controllers`] — task-axes controller library (position / force /
//!   rotation / curl / gripper) with null-space composition.
//! * [`ctrlgen`] — candidate-axes extraction and combinatorial controller
//!   generation per task family.
//! * [`sim`] — quasi-static manipulation simulator: 7-DoF kinematic arm,
//!   three task scenes (button press, block tumble, door open), rewards,
//!   success tests and variation sampling.
//! * [`render`] — synthetic multi-view renderer with ground-truth
//!   cross-view correspondences.
//! * [`diffkernel`] — dense tensors, reverse-mode gradients, the small layer
//!   set used here, and Adam.
//! * [`descriptors`] — dense pixelwise descriptor training and keypoint
//!   transfer by descriptor nearest-neighbour.
//! * [`rl`] — PPO over generated controller sets plus the end-effector-space
//!   baseline.
//! * [`keypointlearn`] — Reinforce training of a spatial-softmax keypoint
//!   network through a frozen task policy.
//! * [`harness`] — experiment orchestration: configs, seeds, pipelines,
//!   metrics and plots.

pub mod controllers;
pub mod ctrlgen;
pub mod descriptors;
pub mod diffkernel;
pub mod error;
pub mod geom;
pub mod harness;
pub mod keypointlearn;
pub mod render;
pub mod rl;
pub mod sim;

pub use error::{Error, Result};
