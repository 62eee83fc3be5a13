//! Scene models for the three manipulation task families.
//!
//! A [`SceneModel`] is a sampled variation (sizes, positions, appearance)
//! plus the articulation state of the task mechanism (button plunger depth,
//! block tumble angle, door handle/hinge angles). World-posed bodies for
//! rendering and contact are derived on demand so geometry and mechanism
//! state can never drift apart.

use crate::geom::{Rot3, UnitVec3, Vec3};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Task families studied by the artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskFamily {
    Button,
    BlockTumble,
    DoorOpen,
}

impl TaskFamily {
    /// Number of semantic keypoints each family uses.
    pub fn keypoint_count(&self) -> usize {
        match self {
            TaskFamily::Button => 2,
            TaskFamily::BlockTumble => 10,
            TaskFamily::DoorOpen => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::Button => "button",
            TaskFamily::BlockTumble => "block_tumble",
            TaskFamily::DoorOpen => "door_open",
        }
    }

    pub fn parse(s: &str) -> Option<TaskFamily> {
        match s {
            "button" => Some(TaskFamily::Button),
            "block_tumble" => Some(TaskFamily::BlockTumble),
            "door_open" => Some(TaskFamily::DoorOpen),
            _ => None,
        }
    }
}

/// Rigid-body pose (body-to-world).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rot3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rot3, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn transform_point(&self, local: &Vec3) -> Vec3 {
        self.rotation * local + self.translation
    }

    pub fn inverse_transform_point(&self, world: &Vec3) -> Vec3 {
        self.rotation.inverse() * (world - self.translation)
    }

    pub fn transform_vector(&self, local: &Vec3) -> Vec3 {
        self.rotation * local
    }
}

/// Analytic collision/render primitive, defined in the body frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Shape {
    /// Axis-aligned box in the body frame with the given half extents.
    Box { half: Vec3 },
    /// Cylinder along the body z axis.
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    /// Half extents of the tight body-frame bounding box.
    pub fn bounding_half_extents(&self) -> Vec3 {
        match self {
            Shape::Box { half } => *half,
            Shape::Cylinder {
                radius,
                half_height,
            } => Vector3::new(*radius, *radius, *half_height),
        }
    }

    /// Signed distance from a body-frame point to the shape surface
    /// (negative inside).
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Box { half } => {
                let d = Vector3::new(p.x.abs() - half.x, p.y.abs() - half.y, p.z.abs() - half.z);
                let outside = Vector3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0));
                outside.norm() + d.x.max(d.y).max(d.z).min(0.0)
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let (orx, orz) = (dr.max(0.0), dz.max(0.0));
                (orx * orx + orz * orz).sqrt() + dr.max(dz).min(0.0)
            }
        }
    }
}

/// One world-posed rigid part.
#[derive(Debug, Clone)]
pub struct Body {
    /// Stable per-family part id (0 is reserved for background).
    pub id: u32,
    pub name: &'static str,
    pub shape: Shape,
    pub pose: Pose,
    pub albedo: [f64; 3],
}

impl Body {
    /// Signed distance from a world point to this body's surface.
    pub fn signed_distance_world(&self, world: &Vec3) -> f64 {
        self.shape.signed_distance(&self.pose.inverse_transform_point(world))
    }
}

/// Button-press variation: a plunger-style button on top of a block/box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ButtonVariation {
    pub box_half: Vec3,
    pub box_center_xy: [f64; 2],
    pub button_radius: f64,
    /// Exposed plunger height above the box top when unpressed.
    pub button_exposed: f64,
    /// Plunger travel limit (meters).
    pub travel: f64,
    /// Button center offset on the top face, relative to the box center.
    pub button_offset: [f64; 2],
    pub albedo_box: [f64; 3],
    pub albedo_button: [f64; 3],
}

///// Block-tumble variation: a cube on the ground plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockVariation {
    /// Full edge length of the cube (meters).
    pub edge: f64,
    pub center_xy: [f64; 2],
    pub albedo: [f64; 3],
}

/// Lever handle cross-section shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandleShape {
    Cuboid,
    Cylinder,
}

///// Door-opening variation: hinged panel with a rotating lever handle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoorVariation {
    /// Hinge axis position (vertical line through this xy).
    pub hinge_xy: [f64; 2],
    /// Panel width from hinge to the free edge (meters, along −y at φ=0).
    pub panel_width: f64,
    pub panel_height: f64,
    pub panel_bottom_z: f64,
    pub panel_thickness: f64,
    /// Distance of the handle shaft from the hinge along the panel.
    pub handle_along: f64,
    /// Handle shaft height above the ground.
    pub handle_z: f64,
    pub shaft_length: f64,
    pub shaft_radius: f64,
    pub lever_length: f64,
    /// Lever cross-section thickness; must fit inside the gripper aperture.
    pub lever_thickness: f64,
    pub lever_shape: HandleShape,
    pub albedo_panel: [f64; 3],
    pub albedo_handle: [f64; 3],
}

/// Sampled per-task variation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Variation {
    Button(ButtonVariation),
    Block(BlockVariation),
    Door(DoorVariation),
}

/// Articulated joint state for the task mechanism.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum JointState {
    /// Plunger press depth j ∈ [0, travel].
    Button { j: f64 },
    /// Tumble progress ψ ∈ [0, π/2] about the support edge.
    Block { psi: f64 },
    /// Handle rotation θ (radians, 0 = horizontal) and hinge opening φ.
    Door { theta: f64, phi: f64 },
}

/// Complete scene: sampled variation plus mechanism state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneModel {
    pub family: TaskFamily,
    pub variation: Variation,
    pub joints: JointState,
}

/// Body-frame template (coordinates scaled to [−1, 1] per half-edge) for
/// the ten block keypoints: near-edge points on the top face plus points on
/// the two robot-facing side faces, so the set is co-visible from a single
/// upper (−x, −y) view and includes side-surface anchors a pushing
/// controller can act through.
const BLOCK_KEYPOINT_TEMPLATE: [[f64; 3]; 10] = [
    [-0.85, -0.85, 1.0],
    [-0.85, 0.85, 1.0],
    [0.85, -0.85, 1.0],
    [0.85, 0.85, 1.0],
    [-0.85, 0.0, 1.0],
    [0.0, -0.85, 1.0],
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [-1.0, -0.85, 0.0],
];

fn sample_albedo(rng: &mut impl Rng) -> [f64; 3] {
    // Keep channels well inside (0, 1) so shading never clips.
    [
        rng.gen_range(0.25..0.9),
        rng.gen_range(0.25..0.9),
        rng.gen_range(0.25..0.9),
    ]
}

impl SceneModel {
    /// Samples a task variation from the documented ranges. Deterministic
    /// given the rng state.
    pub fn sample(family: TaskFamily, rng: &mut impl Rng) -> SceneModel {
        match family {
            TaskFamily::Button => {
                let box_half: Vec3 = Vector3::new(
                    rng.gen_range(0.08..0.14),
                    rng.gen_range(0.08..0.14),
                    rng.gen_range(0.05..0.10),
                );
                let button_radius = rng.gen_range(0.025..0.045);
                let margin = box_half.x.min(box_half.y) - button_radius - 0.01;
                let off = margin.max(0.0) * 0.6;
                SceneModel {
                    family,
                    variation: Variation::Button(ButtonVariation {
                        box_half,
                        box_center_xy: [rng.gen_range(0.40..0.55), rng.gen_range(-0.12..0.12)],
                        button_radius,
                        button_exposed: rng.gen_range(0.16..0.20),
                        travel: 0.15,
                        button_offset: [rng.gen_range(-off..off), rng.gen_range(-off..off)],
                        albedo_box: sample_albedo(rng),
                        albedo_button: sample_albedo(rng),
                    }),
                    joints: JointState::Button { j: 0.0 },
                }
            }
            TaskFamily::BlockTumble => SceneModel {
                family,
                variation: Variation::Block(BlockVariation {
                    edge: rng.gen_range(0.07..0.16),
                    center_xy: [rng.gen_range(0.42..0.55), rng.gen_range(-0.10..0.10)],
                    albedo: sample_albedo(rng),
                }),
                joints: JointState::Block { psi: 0.0 },
            },
            TaskFamily::DoorOpen => {
                let panel_width = rng.gen_range(0.30..0.40);
                SceneModel {
                    family,
                    variation: Variation::Door(DoorVariation {
                        hinge_xy: [rng.gen_range(0.50..0.58), rng.gen_range(0.24..0.30)],
                        panel_width,
                        panel_height: rng.gen_range(0.35..0.45),
                        panel_bottom_z: 0.12,
                        panel_thickness: 0.02,
                        handle_along: panel_width * rng.gen_range(0.72..0.85),
                        handle_z: rng.gen_range(0.32..0.42),
                        shaft_length: rng.gen_range(0.05..0.07),
                        shaft_radius: rng.gen_range(0.008..0.011),
                        lever_length: rng.gen_range(0.08..0.12),
                        lever_thickness: rng.gen_range(0.012..0.019),
                        lever_shape: if rng.gen_bool(0.5) {
                            HandleShape::Cuboid
                        } else {
                            HandleShape::Cylinder
                        },
                        albedo_panel: sample_albedo(rng),
                        albedo_handle: sample_albedo(rng),
                    }),
                    joints: JointState::Door {
                        theta: 0.0,
                        phi: 0.0,
                    },
                }
            }
        }
    }

    // ----- Button geometry -----------------------------------------------

    /// Box top-face height (button tasks).
    pub fn button_box_top(&self) -> f64 {
        match &self.variation {
            Variation::Button(v) => 2.0 * v.box_half.z,
            _ => unreachable!("button geometry on non-button scene"),
        }
    }

    /// World center of the button cap's top disc at the current press depth.
    pub fn button_top_center(&self) -> Vec3 {
        let (v, j) = self.button_parts();
        Vector3::new(
            v.box_center_xy[0] + v.button_offset[0],
            v.box_center_xy[1] + v.button_offset[1],
            self.button_box_top() + v.button_exposed - j,
        )
    }

    fn button_parts(&self) -> (&ButtonVariation, f64) {
        match (&self.variation, &self.joints) {
            (Variation::Button(v), JointState::Button { j }) => (v, *j),
            _ => unreachable!("button geometry on non-button scene"),
        }
    }

    // ----- Block geometry -------------------------------------------------

    fn block_parts(&self) -> (&BlockVariation, f64) {
        match (&self.variation, &self.joints) {
            (Variation::Block(v), JointState::Block { psi }) => (v, *psi),
            _ => unreachable!("block geometry on non-block scene"),
        }
    }

    /// Pivot point on the support edge the block tumbles about
    /// (the bottom edge on the +x side, running along y).
    pub fn block_pivot(&self) -> Vec3 {
        let (v, _) = self.block_parts();
        Vector3::new(v.center_xy[0] + v.edge / 2.0, v.center_xy[1], 0.0)
    }

    /// Tumble axis: +y through the pivot (right-handed: +ψ tips toward +x).
    pub fn block_tumble_axis(&self) -> UnitVec3 {
        Unit::new_unchecked(Vector3::y())
    }

    /// Current block pose (rotation about the pivot edge by ψ).
    pub fn block_pose(&self) -> Pose {
        let (v, psi) = self.block_parts();
        let pivot = self.block_pivot();
        let rest_center = Vector3::new(v.center_xy[0], v.center_xy[1], v.edge / 2.0);
        let rot = Rotation3::from_axis_angle(&self.block_tumble_axis(), psi);
        Pose::new(rot, pivot + rot * (rest_center - pivot))
    }

    /// Remaining angle to the 90° tumble target.
    pub fn block_angle_to_target(&self) -> f64 {
        let (_, psi) = self.block_parts();
        (std::f64::consts::FRAC_PI_2 - psi).abs()
    }

    // ----- Door geometry ----------------------------------------------------

    fn door_parts(&self) -> (&DoorVariation, f64, f64) {
        match (&self.variation, &self.joints) {
            (Variation::Door(v), JointState::Door { theta, phi }) => (v, *theta, *phi),
            _ => unreachable!("door geometry on non-door scene"),
        }
    }

    /// Unit direction from the hinge toward the panel's free edge.
    pub fn door_panel_dir(&self) -> UnitVec3 {
        let (_, _, phi) = self.door_parts();
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -phi);
        Unit::new_normalize(rot * Vector3::new(0.0, -1.0, 0.0))
    }

    /// Outward panel normal (toward the robot at φ=0); also the handle
    /// shaft axis.
    pub fn door_panel_normal(&self) -> UnitVec3 {
        let (_, _, phi) = self.door_parts();
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -phi);
        Unit::new_normalize(rot * Vector3::new(-1.0, 0.0, 0.0))
    }

    /// Point where the handle shaft meets the panel.
    pub fn door_handle_base(&self) -> Vec3 {
        let (v, _, _) = self.door_parts();
        let hinge = Vector3::new(v.hinge_xy[0], v.hinge_xy[1], 0.0);
        hinge
            + self.door_panel_dir().into_inner() * v.handle_along
            + self.door_panel_normal().into_inner() * (v.panel_thickness / 2.0)
            + Vector3::new(0.0, 0.0, v.handle_z)
    }

    /// Free end of the handle shaft (lever pivot).
    pub fn door_shaft_end(&self) -> Vec3 {
        let (v, _, _) = self.door_parts();
        self.door_handle_base() + self.door_panel_normal().into_inner() * v.shaft_length
    }

    /// Unit direction along the lever at the current handle angle θ
    /// (horizontal toward the hinge at θ=0, rotating downward for θ>0).
    pub fn door_lever_dir(&self) -> UnitVec3 {
        let (_, theta, _) = self.door_parts();
        let shaft = self.door_panel_normal();
        let rest = -self.door_panel_dir().into_inner(); // toward the hinge
        let rot = Rotation3::from_axis_angle(&shaft, theta);
        Unit::new_normalize(rot * rest)
    }

    /// Middle of the lever: the intended grasp point.
    pub fn door_grasp_point(&self) -> Vec3 {
        let (v, _, _) = self.door_parts();
        self.door_shaft_end() + self.door_lever_dir().into_inner() * (v.lever_length / 2.0)
    }

    /// Lever tip position.
    pub fn door_lever_tip(&self) -> Vec3 {
        let (v, _, _) = self.door_parts();
        self.door_shaft_end() + self.door_lever_dir().into_inner() * v.lever_length
    }

    // ----- Generic queries --------------------------------------------------

    /// World-posed bodies at the current joint state.
    pub fn bodies(&self) -> Vec<Body> {
        match &self.variation {
            Variation::Button(v) => {
                let box_center = Vector3::new(v.box_center_xy[0], v.box_center_xy[1], v.box_half.z);
                let cap_half_h = (v.button_exposed + 0.02) / 2.0;
                let cap_center = self.button_top_center() - Vector3::new(0.0, 0.0, cap_half_h);
                vec![
                    Body {
                        id: 1,
                        name: "box",
                        shape: Shape::Box { half: v.box_half },
                        pose: Pose::new(Rot3::identity(), box_center),
                        albedo: v.albedo_box,
                    },
                    Body {
                        id: 2,
                        name: "button",
                        shape: Shape::Cylinder {
                            radius: v.button_radius,
                            half_height: cap_half_h,
                        },
                        pose: Pose::new(Rot3::identity(), cap_center),
                        albedo: v.albedo_button,
                    },
                ]
            }
            Variation::Block(v) => {
                let h = v.edge / 2.0;
                vec![Body {
                    id: 1,
                    name: "block",
                    shape: Shape::Box {
                        half: Vector3::new(h, h, h),
                    },
                    pose: self.block_pose(),
                    albedo: v.albedo,
                }]
            }
            Variation::Door(v) => {
                let (_, _, phi) = self.door_parts();
                let hinge = Vector3::new(v.hinge_xy[0], v.hinge_xy[1], 0.0);
                let panel_rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -phi);
                let panel_center = hinge
                    + self.door_panel_dir().into_inner() * (v.panel_width / 2.0)
                    + Vector3::new(0.0, 0.0, v.panel_bottom_z + v.panel_height / 2.0);
                // Panel body frame: x = outward normal, y = panel direction.
                let panel_frame = panel_rot
                    * Rotation3::from_axis_angle(
                        &Vector3::z_axis(),
                        std::f64::consts::PI,
                    );
                let shaft_center = self.door_handle_base()
                    + self.door_panel_normal().into_inner() * (v.shaft_length / 2.0);
                // Cylinder axis z must align with the shaft direction.
                let shaft_rot = rot_z_to(&self.door_panel_normal());
                let lever_center = self.door_grasp_point();
                let lever_dir = self.door_lever_dir();
                let lever_body = match v.lever_shape {
                    HandleShape::Cuboid => Shape::Box {
                        half: Vector3::new(
                            v.lever_thickness / 2.0,
                            v.lever_thickness / 2.0,
                            v.lever_length / 2.0,
                        ),
                    },
                    HandleShape::Cylinder => Shape::Cylinder {
                        radius: v.lever_thickness / 2.0,
                        half_height: v.lever_length / 2.0,
                    },
                };
                vec![
                    Body {
                        id: 1,
                        name: "panel",
                        shape: Shape::Box {
                            half: Vector3::new(
                                v.panel_thickness / 2.0,
                                v.panel_width / 2.0,
                                v.panel_height / 2.0,
                            ),
                        },
                        pose: Pose::new(panel_frame, panel_center),
                        albedo: v.albedo_panel,
                    },
                    Body {
                        id: 2,
                        name: "shaft",
                        shape: Shape::Cylinder {
                            radius: v.shaft_radius,
                            half_height: v.shaft_length / 2.0,
                        },
                        pose: Pose::new(shaft_rot, shaft_center),
                        albedo: v.albedo_handle,
                    },
                    Body {
                        id: 3,
                        name: "lever",
                        shape: lever_body,
                        pose: Pose::new(rot_z_to(&lever_dir), lever_center),
                        albedo: v.albedo_handle,
                    },
                    Body {
                        id: 4,
                        name: "frame",
                        shape: Shape::Box {
                            half: Vector3::new(0.02, 0.02, v.panel_height / 2.0 + 0.04),
                        },
                        pose: Pose::new(
                            Rot3::identity(),
                            hinge + Vector3::new(0.0, 0.0, v.panel_bottom_z + v.panel_height / 2.0),
                        ),
                        albedo: [0.35, 0.35, 0.38],
                    },
                ]
            }
        }
    }

    /// Ground-truth semantic keypoints (world frame, current state).
    /// Counts are 2 (button), 10 (block), 4 (door).
    pub fn gt_keypoints(&self) -> Vec<Vec3> {
        match &self.variation {
            Variation::Button(v) => {
                let top = self.button_top_center();
                vec![
                    top,
                    // Rim point on the cap's top edge, toward the robot.
                    top + Vector3::new(-v.button_radius, 0.0, 0.0),
                ]
            }
            Variation::Block(v) => {
                let pose = self.block_pose();
                let h = v.edge / 2.0;
                BLOCK_KEYPOINT_TEMPLATE
                    .iter()
                    .map(|[tx, ty, tz]| {
                        pose.transform_point(&Vector3::new(tx * h, ty * h, tz * h))
                    })
                    .collect()
            }
            Variation::Door(_) => vec![
                self.door_lever_tip(),
                self.door_grasp_point(),
                self.door_shaft_end(),
                self.door_handle_base(),
            ],
        }
    }

    /// Body axes of the task's focus object at the current state. These are
    /// the candidate axes for controller generation.
    pub fn focus_axes(&self) -> [UnitVec3; 3] {
        match &self.variation {
            // Box and block sit axis-aligned at episode start.
            Variation::Button(_) => [
                Unit::new_unchecked(Vector3::x()),
                Unit::new_unchecked(Vector3::y()),
                Unit::new_unchecked(Vector3::z()),
            ],
            Variation::Block(_) => {
                let r = self.block_pose().rotation;
                [
                    Unit::new_normalize(r * Vector3::x()),
                    Unit::new_normalize(r * Vector3::y()),
                    Unit::new_normalize(r * Vector3::z()),
                ]
            }
            Variation::Door(_) => {
                let shaft = self.door_panel_normal();
                let lever = self.door_lever_dir();
                let third = Unit::new_normalize(shaft.cross(&lever));
                [shaft, lever, third]
            }
        }
    }

    /// A camera target point that keeps the focus object centered.
    pub fn focus_point(&self) -> Vec3 {
        match &self.variation {
            Variation::Button(_) => self.button_top_center(),
            Variation::Block(_) => self.block_pose().translation,
            Variation::Door(_) => self.door_grasp_point(),
        }
    }
}

/// Rotation taking the body z axis onto `dir`.
fn rot_z_to(dir: &UnitVec3) -> Rot3 {
    let z = Unit::new_unchecked(Vector3::z());
    let d = crate::geom::rotation_between(&z, dir);
    Rotation3::from_axis_angle(&d.axis, d.angle)
}
