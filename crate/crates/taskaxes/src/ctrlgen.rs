//! Combinatorial controller-set generation: keypoints × candidate axes per
//! task family, with deterministic ordering and exact per-family counts
//! (button 14, block 40, door 51).

use crate::controllers::{
    ControllerKind, ControllerSpec, DEFAULT_CURL_STEP, DEFAULT_FORCE_MAGNITUDE,
};
use crate::geom::{UnitVec3, Vec3};
use crate::sim::scene::{SceneModel, TaskFamily};
use crate::{Error, Result};
use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};

/// Where a candidate axis came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisProvenance {
    ObjectAxis,
    GlobalAxis,
}

/// A candidate axis with its provenance tag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaggedAxis {
    pub axis: UnitVec3,
    pub provenance: AxisProvenance,
}

/// The candidate axes extracted from a scene, deduplicated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateAxes {
    pub axes: Vec<TaggedAxis>,
}

impl CandidateAxes {
    /// Unit vectors only, in stored order.
    pub fn vectors(&self) -> Vec<UnitVec3> {
        self.axes.iter().map(|t| t.axis).collect()
    }
}

/// An ordered controller set for one task family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSet {
    pub controllers: Vec<ControllerSpec>,
    pub task_family: TaskFamily,
    pub keypoint_count: usize,
}

impl ControllerSet {
    pub fn len(&self) -> usize {
        self.controllers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controllers.is_empty()
    }
}

/// Extracts the focus object's three body axes and, optionally, the three
/// global axes; near-duplicates (same direction within 1e-9) are dropped,
/// keeping the earlier (object) axis.
pub fn extract_candidate_axes(scene: &SceneModel, include_global: bool) -> CandidateAxes {
    let mut axes: Vec<TaggedAxis> = scene
        .focus_axes()
        .into_iter()
        .map(|axis| TaggedAxis {
            axis,
            provenance: AxisProvenance::ObjectAxis,
        })
        .collect();
    if include_global {
        for global in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
            let duplicate = axes
                .iter()
                .any(|t| (t.axis.into_inner() - global.into_inner()).norm() < 1e-9);
            if !duplicate {
                axes.push(TaggedAxis {
                    axis: global,
                    provenance: AxisProvenance::GlobalAxis,
                });
            }
        }
    }
    CandidateAxes { axes }
}

/// Generates the full controller set for a family from its keypoints and
/// candidate axes.
///
/// Per-family structure (in emission order — gripper, error-axis position,
/// fixed-axis position, rotation, curl, force — each sub-block ordered by
/// keypoint index, then axis index, then sign):
///
/// - Button: 2 error-axis position + 2 keypoints × 3 fixed axes
///   + 3 axes × 2 signs object-frame force = 14.
/// - BlockTumble: 10 error-axis position + 10 keypoints × 3 axes
///   keypoint-anchored force = 40.
/// - DoorOpen: gripper open/close + 4 error-axis position
///   + 3 EE axes × 3 handle axes × 2 signs rotation
///   + 4 keypoints × 3 axes curl + 4 keypoints × 3 axes keypoint-anchored
///   force + 3 negative-handle-axis free force = 51.
pub fn generate_controllers(
    family: TaskFamily,
    keypoints: &[Vec3],
    axes: &CandidateAxes,
) -> Result<ControllerSet> {
    if keypoints.len() != family.keypoint_count() {
        return Err(Error::ControllerGeneration(format!(
            "{} expects {} keypoints, got {}",
            family.name(),
            family.keypoint_count(),
            keypoints.len()
        )));
    }
    generate_reduced(family, keypoints, axes)
}

/// [`generate_controllers`] without the family keypoint-count check, for
/// reduced sets: keypoint learning predicts `C` keypoint channels (often a
/// single one) and builds the same per-family controller structure from
/// however many targets it has.
pub fn generate_reduced(
    family: TaskFamily,
    keypoints: &[Vec3],
    axes: &CandidateAxes,
) -> Result<ControllerSet> {
    if keypoints.is_empty() {
        return Err(Error::ControllerGeneration(
            "need at least 1 keypoint".into(),
        ));
    }
    let ax = axes.vectors();
    if ax.len() < 3 {
        return Err(Error::ControllerGeneration(format!(
            "need at least 3 candidate axes, got {}",
            ax.len()
        )));
    }

    let mut out: Vec<ControllerSpec> = Vec::new();
    let push = |out: &mut Vec<ControllerSpec>, kind: ControllerKind| {
        out.push(ControllerSpec::new(kind));
    };

    match family {
        TaskFamily::Button => {
            for kp in keypoints {
                push(&mut out, ControllerKind::PositionErrorAxis { target: *kp });
            }
            for kp in keypoints {
                for a in &ax {
                    push(
                        &mut out,
                        ControllerKind::PositionFixedAxis {
                            target: *kp,
                            axis: *a,
                        },
                    );
                }
            }
            for a in &ax {
                for sign in [1.0, -1.0] {
                    push(
                        &mut out,
                        ControllerKind::Force {
                            magnitude: DEFAULT_FORCE_MAGNITUDE,
                            axis: Unit::new_normalize(a.into_inner() * sign),
                            approach: None,
                        },
                    );
                }
            }
        }
        TaskFamily::BlockTumble => {
            for kp in keypoints {
                push(&mut out, ControllerKind::PositionErrorAxis { target: *kp });
            }
            for kp in keypoints {
                for a in &ax {
                    push(
                        &mut out,
                        ControllerKind::Force {
                            magnitude: DEFAULT_FORCE_MAGNITUDE,
                            axis: *a,
                            approach: Some(*kp),
                        },
                    );
                }
            }
        }
        TaskFamily::DoorOpen => {
            push(&mut out, ControllerKind::GripperOpen);
            push(&mut out, ControllerKind::GripperClose);
            for kp in keypoints {
                push(&mut out, ControllerKind::PositionErrorAxis { target: *kp });
            }
            for selector in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
                for a in &ax {
                    for sign in [1.0, -1.0] {
                        push(
                            &mut out,
                            ControllerKind::Rotation {
                                ee_axis_selector: selector,
                                target: Unit::new_normalize(a.into_inner() * sign),
                            },
                        );
                    }
                }
            }
            for kp in keypoints {
                for a in &ax {
                    push(
                        &mut out,
                        ControllerKind::CurlAttractor {
                            center: *kp,
                            axis: *a,
                            angle_step: DEFAULT_CURL_STEP,
                        },
                    );
                }
            }
            for kp in keypoints {
                for a in &ax {
                    push(
                        &mut out,
                        ControllerKind::Force {
                            magnitude: DEFAULT_FORCE_MAGNITUDE,
                            axis: *a,
                            approach: Some(*kp),
                        },
                    );
                }
            }
            for a in &ax {
                push(
                    &mut out,
                    ControllerKind::Force {
                        magnitude: DEFAULT_FORCE_MAGNITUDE,
                        axis: Unit::new_normalize(-a.into_inner()),
                        approach: None,
                    },
                );
            }
        }
    }

    for spec in &out {
        spec.validate()?;
    }
    Ok(ControllerSet {
        controllers: out,
        task_family: family,
        keypoint_count: keypoints.len(),
    })
}

/// Convenience: candidate axes and ground-truth keypoints straight from the
/// scene (the vision-free path used by oracle tests and K+GT runs).
pub fn generate_from_scene(scene: &SceneModel, include_global: bool) -> Result<ControllerSet> {
    let axes = extract_candidate_axes(scene, include_global);
    generate_controllers(scene.family, &scene.gt_keypoints(), &axes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::SceneModel;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_object_axes() {
        let mut rng = StdRng::seed_from_u64(1);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let axes = extract_candidate_axes(&scene, false);
        assert_eq!(axes.axes.len(), 3);
        // The button scene's focus axes are the world axes.
        for (t, e) in axes.axes.iter().zip([
            Vector3::x_axis(),
            Vector3::y_axis(),
            Vector3::z_axis(),
        ]) {
            assert_relative_eq!(
                (t.axis.into_inner() - e.into_inner()).norm(),
                0.0,
                epsilon = 1e-12
            );
            assert_eq!(t.provenance, AxisProvenance::ObjectAxis);
        }
    }

    #[test]
    fn rotated_object_axes_oracle() {
        // A block tumbled by 90° has body axes {rotated basis}; compare to
        // rotating each basis vector directly.
        let mut rng = StdRng::seed_from_u64(2);
        let mut scene = SceneModel::sample(TaskFamily::BlockTumble, &mut rng);
        scene.joints = crate::sim::scene::JointState::Block { psi: FRAC_PI_2 };
        let rot = scene.block_pose().rotation;
        let axes = extract_candidate_axes(&scene, false);
        for (t, basis) in axes.axes.iter().zip([
            Vector3::x_axis(),
            Vector3::y_axis(),
            Vector3::z_axis(),
        ]) {
            let expected = rot * basis.into_inner();
            assert_relative_eq!((t.axis.into_inner() - expected).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_axes_dedup_when_coincident() {
        let mut rng = StdRng::seed_from_u64(3);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        // Button object axes are the world axes, so adding globals is a no-op.
        let axes = extract_candidate_axes(&scene, true);
        assert_eq!(axes.axes.len(), 3);

        // A tumbling block mid-fall has distinct body axes; globals add more.
        let mut block = SceneModel::sample(TaskFamily::BlockTumble, &mut rng);
        block.joints = crate::sim::scene::JointState::Block { psi: 0.3 };
        let with_global = extract_candidate_axes(&block, true);
        assert!(with_global.axes.len() > 3);
        assert!(with_global
            .axes
            .iter()
            .any(|t| t.provenance == AxisProvenance::GlobalAxis));
    }

    #[test]
    fn exact_counts_per_family() {
        let mut rng = StdRng::seed_from_u64(4);
        for (family, expected) in [
            (TaskFamily::Button, 14),
            (TaskFamily::BlockTumble, 40),
            (TaskFamily::DoorOpen, 51),
        ] {
            let scene = SceneModel::sample(family, &mut rng);
            let set = generate_from_scene(&scene, false).unwrap();
            assert_eq!(set.len(), expected, "{} controller count", family.name());
        }
    }

    #[test]
    fn counts_hold_across_variations() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            for (family, expected) in [
                (TaskFamily::Button, 14),
                (TaskFamily::BlockTumble, 40),
                (TaskFamily::DoorOpen, 51),
            ] {
                let scene = SceneModel::sample(family, &mut rng);
                let set = generate_from_scene(&scene, false).unwrap();
                assert_eq!(set.len(), expected);
            }
        }
    }

    #[test]
    fn wrong_keypoint_count_is_error() {
        let mut rng = StdRng::seed_from_u64(6);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let axes = extract_candidate_axes(&scene, false);
        let kps = vec![Vec3::zeros(); 3];
        assert!(generate_controllers(TaskFamily::Button, &kps, &axes).is_err());
    }

    #[test]
    fn deterministic_serialization() {
        let mut rng_a = StdRng::seed_from_u64(7);
        let mut rng_b = StdRng::seed_from_u64(7);
        for family in [
            TaskFamily::Button,
            TaskFamily::BlockTumble,
            TaskFamily::DoorOpen,
        ] {
            let sa = SceneModel::sample(family, &mut rng_a);
            let sb = SceneModel::sample(family, &mut rng_b);
            let a = serde_json::to_string(&generate_from_scene(&sa, false).unwrap()).unwrap();
            let b = serde_json::to_string(&generate_from_scene(&sb, false).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn all_generated_specs_validate() {
        let mut rng = StdRng::seed_from_u64(8);
        for family in [
            TaskFamily::Button,
            TaskFamily::BlockTumble,
            TaskFamily::DoorOpen,
        ] {
            let scene = SceneModel::sample(family, &mut rng);
            let set = generate_from_scene(&scene, false).unwrap();
            for spec in &set.controllers {
                spec.validate().unwrap();
            }
        }
    }

    #[test]
    fn every_keypoint_is_some_target() {
        let mut rng = StdRng::seed_from_u64(9);
        for family in [
            TaskFamily::Button,
            TaskFamily::BlockTumble,
            TaskFamily::DoorOpen,
        ] {
            let scene = SceneModel::sample(family, &mut rng);
            let kps = scene.gt_keypoints();
            let set = generate_from_scene(&scene, false).unwrap();
            for kp in &kps {
                let covered = set.controllers.iter().any(|spec| match &spec.kind {
                    ControllerKind::PositionErrorAxis { target } => (target - kp).norm() < 1e-12,
                    ControllerKind::PositionFixedAxis { target, .. } => {
                        (target - kp).norm() < 1e-12
                    }
                    ControllerKind::CurlAttractor { center, .. } => (center - kp).norm() < 1e-12,
                    ControllerKind::Force {
                        approach: Some(p), ..
                    } => (p - kp).norm() < 1e-12,
                    _ => false,
                });
                assert!(covered, "keypoint {kp:?} not targeted in {}", family.name());
            }
        }
    }

    #[test]
    fn ordering_is_stable_lexicographic() {
        let mut rng = StdRng::seed_from_u64(10);
        for family in [
            TaskFamily::Button,
            TaskFamily::BlockTumble,
            TaskFamily::DoorOpen,
        ] {
            let scene = SceneModel::sample(family, &mut rng);
            let set = generate_from_scene(&scene, false).unwrap();
            let tags: Vec<u8> = set.controllers.iter().map(|c| c.kind.order_tag()).collect();
            let mut sorted = tags.clone();
            sorted.sort_unstable();
            assert_eq!(tags, sorted, "{} kinds out of order", family.name());
        }
    }

    #[test]
    fn global_axes_change_counts_and_stay_valid() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut scene = SceneModel::sample(TaskFamily::BlockTumble, &mut rng);
        scene.joints = crate::sim::scene::JointState::Block { psi: 0.5 };
        let set = generate_from_scene(&scene, true).unwrap();
        // The tumble axis (+y) coincides with global y, so dedup leaves 5
        // axes: 10 error-axis + 10 kp × 5 axes = 60.
        assert_eq!(set.len(), 60);
        for spec in &set.controllers {
            spec.validate().unwrap();
        }
    }

    #[test]
    fn random_keypoints_also_generate_exact_counts() {
        // Counts must not depend on keypoint values (vision noise).
        let mut rng = StdRng::seed_from_u64(12);
        for (family, expected) in [
            (TaskFamily::Button, 14),
            (TaskFamily::BlockTumble, 40),
            (TaskFamily::DoorOpen, 51),
        ] {
            let scene = SceneModel::sample(family, &mut rng);
            let axes = extract_candidate_axes(&scene, false);
            let kps: Vec<Vec3> = (0..family.keypoint_count())
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(0.0..0.5),
                    )
                })
                .collect();
            let set = generate_controllers(family, &kps, &axes).unwrap();
            assert_eq!(set.len(), expected);
        }
    }
}
