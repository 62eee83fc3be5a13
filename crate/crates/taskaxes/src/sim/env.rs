//! Quasi-static episode stepping for the three task environments.
//!
//! Motion is resolved kinematically: each policy step runs a fixed number of
//! substeps, each of which turns the active command into a small
//! end-effector displacement, resolves mechanism constraints (button plunger
//! yield, block tumble moment balance, door handle/hinge joints, rigid
//! grasps), tracks the arm with damped-least-squares IK, and accumulates
//! penalty-spring contact forces.

use crate::controllers::{compose_commands, compute_command, Command, ControllerSpec, GripperAction};
use crate::geom::{apply_delta_rotation, AngleAxis, Rot3, UnitVec3, Vec3};
use crate::sim::arm::{fk, ik_track, GRIPPER_MAX_WIDTH, Q_HOME};
use crate::sim::scene::{JointState, SceneModel, TaskFamily, Variation};
use crate::{Error, Result};
use nalgebra::{Matrix3x2, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// End-effector state tracked by the environment. `position`/`rotation`
/// always equal `fk(joints)`.
#[derive(Debug, Clone)]
pub struct EEState {
    pub position: Vec3,
    pub rotation: Rot3,
    pub contact_force: Vec3,
    pub gripper_width: f64,
    pub joints: [f64; 7],
}

impl EEState {
    pub fn at_home() -> Self {
        let (position, rotation) = fk(&Q_HOME).expect("home pose within limits");
        EEState {
            position,
            rotation,
            contact_force: Vec3::zeros(),
            gripper_width: GRIPPER_MAX_WIDTH,
            joints: Q_HOME,
        }
    }
}

/// Simulation constants and episode parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Control interval per substep (seconds).
    pub dt: f64,
    /// Substeps per policy decision.
    pub substeps: usize,
    /// Episode length in policy steps.
    pub episode_len: usize,
    /// Reproduce the printed reward signs instead of the improvement
    /// convention (see `reward_for`).
    pub strict_literal_reward: bool,
    /// Penalty-spring contact stiffness (N/m).
    pub contact_stiffness: f64,
    /// Guarded-creep rate for force commands (m per substep).
    pub creep_rate: f64,
    /// Gripper open/close rate (m per substep).
    pub gripper_rate: f64,
    /// Maximum TCP-to-lever distance for a grasp to latch (m).
    pub grasp_radius: f64,
    /// Maximum object thickness the closed gripper can hold (m).
    pub grasp_aperture: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.02,
            substeps: 5,
            episode_len: 120,
            strict_literal_reward: false,
            contact_stiffness: 1000.0,
            creep_rate: 0.004,
            gripper_rate: 0.01,
            grasp_radius: 0.03,
            grasp_aperture: 0.02,
        }
    }
}

/// Effective end-effector contact radius (fingertip ball).
const EE_RADIUS: f64 = 0.012;
/// Button plunger spring rate (N/m): reaction force = rate · depth.
const PLUNGER_SPRING: f64 = 40.0;
/// Plunger spring-return rate when unloaded (m per substep).
const PLUNGER_RETURN: f64 = 0.01;
/// Handle spring-return rate when ungrasped (rad per substep).
const HANDLE_RETURN: f64 = 0.04;
/// Block density (kg/m³) used for the tumble moment balance.
const BLOCK_DENSITY: f64 = 100.0;
/// Gravitational acceleration (m/s²).
const GRAVITY: f64 = 9.81;
/// Maximum tumble rate (rad per substep).
const BLOCK_OMEGA_MAX: f64 = 0.015;
/// Maximum handle / hinge rates (rad per substep).
const THETA_RATE_MAX: f64 = 0.15;
const PHI_RATE_MAX: f64 = 0.05;
/// Handle angle above which the door lock releases (rad).
pub const DOOR_LOCK_THETA: f64 = 1.22;
/// Hinge angle defining door-open success (rad).
pub const DOOR_SUCCESS_PHI: f64 = 0.436;
/// Plunger depth defining button success (m).
pub const BUTTON_SUCCESS_J: f64 = 0.1;
/// Remaining tumble angle defining block success (rad).
pub const BLOCK_SUCCESS_TOL: f64 = 0.1;
/// Handle joint limits.
const THETA_MAX: f64 = 1.8;
const PHI_MAX: f64 = 1.4;
/// Penetration depth beyond which the EE is hard-projected out (m).
const MAX_PENETRATION: f64 = 0.01;

/// Scalar task metrics used by the reward.
#[derive(Debug, Clone, Copy)]
pub struct TaskMetrics {
    pub family: TaskFamily,
    /// End-effector distance to the task target point.
    pub d: f64,
    /// Mechanism progress value (button j, block tumble ψ, door θ).
    pub progress: f64,
    /// Door hinge angle (zero for other tasks).
    pub phi: f64,
}

/// Per-step return bundle.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub info: StepInfo,
}

/// Diagnostics for traces and debugging.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepInfo {
    pub distance: f64,
    pub progress: f64,
    pub phi: f64,
    pub contact_force_norm: f64,
}

/// Rigid attachment of the gripper to the door lever.
#[derive(Debug, Clone, Copy)]
struct Grasp {
    /// Grasp position along the lever, measured from the shaft end (m).
    along: f64,
}

/// One episode's simulation state.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    pub scene: SceneModel,
    pub ee: EEState,
    pub config: EnvConfig,
    grasp: Option<Grasp>,
    t: usize,
    done: bool,
    success: bool,
    prev: TaskMetrics,
}

/// Success predicate on the current mechanism state.
pub fn check_success(scene: &SceneModel) -> bool {
    match scene.joints {
        JointState::Button { j } => j > BUTTON_SUCCESS_J,
        JointState::Block { .. } => scene.block_angle_to_target() < BLOCK_SUCCESS_TOL,
        JointState::Door { phi, .. } => phi > DOOR_SUCCESS_PHI,
    }
}

/// Reward between two consecutive metric snapshots.
///
/// Default convention rewards progress: distance terms use
/// `previous − current` and mechanism terms use `current − previous`. The
/// strict-literal mode instead evaluates the printed form, where every term
/// is `current − previous` and the block angle is the remaining angle to the
/// target.
pub fn reward_for(
    prev: &TaskMetrics,
    cur: &TaskMetrics,
    success: bool,
    strict_literal: bool,
) -> Result<f64> {
    if prev.family != cur.family {
        return Err(Error::TaskMismatch(format!(
            "reward between {:?} and {:?} states",
            prev.family, cur.family
        )));
    }
    let succ = if success { 1.0 } else { 0.0 };
    let d_term = if strict_literal {
        cur.d - prev.d
    } else {
        prev.d - cur.d
    };
    Ok(match cur.family {
        TaskFamily::Button => 10.0 * d_term + 10.0 * (cur.progress - prev.progress) + 100.0 * succ - 0.1,
        TaskFamily::BlockTumble => {
            let angle_term = if strict_literal {
                // θ_t is the remaining |target − ψ|; the printed form adds
                // its raw difference.
                let theta_cur = (std::f64::consts::FRAC_PI_2 - cur.progress).abs();
                let theta_prev = (std::f64::consts::FRAC_PI_2 - prev.progress).abs();
                theta_cur - theta_prev
            } else {
                cur.progress - prev.progress
            };
            10.0 * d_term + 10.0 * angle_term + 100.0 * succ - 0.1
        }
        TaskFamily::DoorOpen => {
            10.0 * d_term
                + 10.0 * (cur.progress - prev.progress)
                + 100.0 * (cur.phi - prev.phi)
                + 100.0 * succ
                - 0.1
                - 0.01
        }
    })
}

impl TaskEnv {
    /// Observation vector length per family.
    pub fn obs_dim(family: TaskFamily) -> usize {
        match family {
            TaskFamily::Button => 25,
            TaskFamily::BlockTumble => 28,
            TaskFamily::DoorOpen => 22,
        }
    }

    pub fn new(scene: SceneModel, config: EnvConfig) -> TaskEnv {
        let ee = EEState::at_home();
        let prev = Self::metrics_of(&scene, &ee);
        TaskEnv {
            scene,
            ee,
            config,
            grasp: None,
            t: 0,
            done: false,
            success: false,
            prev,
        }
    }

    /// Starts a fresh episode on a new scene, arm back at home.
    pub fn reset(&mut self, scene: SceneModel) {
        self.scene = scene;
        self.ee = EEState::at_home();
        self.grasp = None;
        self.t = 0;
        self.done = false;
        self.success = false;
        self.prev = Self::metrics_of(&self.scene, &self.ee);
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    fn metrics_of(scene: &SceneModel, ee: &EEState) -> TaskMetrics {
        match scene.joints {
            JointState::Button { j } => TaskMetrics {
                family: scene.family,
                d: (ee.position - scene.button_top_center()).norm(),
                progress: j,
                phi: 0.0,
            },
            JointState::Block { psi } => TaskMetrics {
                family: scene.family,
                d: (ee.position - scene.block_pose().translation).norm(),
                progress: psi.min(std::f64::consts::FRAC_PI_2),
                phi: 0.0,
            },
            JointState::Door { theta, phi } => TaskMetrics {
                family: scene.family,
                d: (ee.position - scene.door_grasp_point()).norm(),
                progress: theta,
                phi,
            },
        }
    }

    /// Flat observation per the per-task layout (see module docs in `sim`).
    pub fn observe(&self) -> Vec<f64> {
        let mut o = Vec::with_capacity(Self::obs_dim(self.scene.family));
        o.extend_from_slice(&self.ee.joints);
        o.push(self.ee.gripper_width);
        o.extend_from_slice(self.ee.position.as_slice());
        let q = UnitQuaternion::from_rotation_matrix(&self.ee.rotation);
        o.extend_from_slice(&[q.w, q.i, q.j, q.k]);
        o.extend_from_slice(self.ee.contact_force.as_slice());
        match (&self.scene.variation, &self.scene.joints) {
            (Variation::Button(v), JointState::Button { j }) => {
                o.extend_from_slice(&[v.box_center_xy[0], v.box_center_xy[1], v.box_half.z]);
                o.extend_from_slice(self.scene.button_top_center().as_slice());
                o.push(*j);
            }
            (Variation::Block(v), JointState::Block { .. }) => {
                let pose = self.scene.block_pose();
                o.extend_from_slice(pose.translation.as_slice());
                let bq = UnitQuaternion::from_rotation_matrix(&pose.rotation);
                o.extend_from_slice(&[bq.w, bq.i, bq.j, bq.k]);
                o.extend_from_slice(&[v.edge, v.edge, v.edge]);
            }
            (Variation::Door(_), JointState::Door { phi, .. }) => {
                o.extend_from_slice(self.scene.door_handle_base().as_slice());
                o.push(*phi);
            }
            _ => unreachable!("variation/joint kind mismatch"),
        }
        debug_assert_eq!(o.len(), Self::obs_dim(self.scene.family));
        o
    }

    /// Executes one policy step by recomputing each controller's command at
    /// every substep (time-varying error axes) and composing them in order.
    pub fn step_specs(&mut self, specs: &[ControllerSpec]) -> Result<StepResult> {
        if specs.is_empty() {
            return Err(Error::EmptyComposition);
        }
        for _ in 0..self.config.substeps {
            let commands = specs
                .iter()
                .map(|s| compute_command(s, &self.ee))
                .collect::<Result<Vec<_>>>()?;
            let cmd = compose_commands(&commands)?;
            self.substep(&cmd)?;
        }
        Ok(self.finish_step())
    }

    /// Executes one policy step from a fixed command, split evenly across
    /// substeps (the end-effector-space action path).
    pub fn step_command(&mut self, cmd: &Command) -> Result<StepResult> {
        let n = self.config.substeps as f64;
        let per = Command {
            delta_translation: cmd.delta_translation / n,
            delta_rotation: AngleAxis {
                axis: cmd.delta_rotation.axis,
                angle: cmd.delta_rotation.angle / n,
            },
            force: cmd.force,
            gripper: cmd.gripper,
            translation_axis_used: cmd.translation_axis_used,
        };
        for _ in 0..self.config.substeps {
            self.substep(&per)?;
        }
        Ok(self.finish_step())
    }

    fn finish_step(&mut self) -> StepResult {
        let cur = Self::metrics_of(&self.scene, &self.ee);
        let success_now = check_success(&self.scene);
        let reward = reward_for(&self.prev, &cur, success_now, self.config.strict_literal_reward)
            .expect("same family");
        self.prev = cur;
        self.t += 1;
        if success_now {
            self.success = true;
            self.done = true;
        }
        if self.t >= self.config.episode_len {
            self.done = true;
        }
        StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            success: success_now,
            info: StepInfo {
                distance: cur.d,
                progress: cur.progress,
                phi: cur.phi,
                contact_force_norm: self.ee.contact_force.norm(),
            },
        }
    }

    /// One quasi-static substep: gripper, guarded creep, mechanism
    /// resolution, collision projection, IK tracking, contact forces.
    fn substep(&mut self, cmd: &Command) -> Result<()> {
        self.apply_gripper(cmd.gripper);

        // Guarded creep: force commands advance along their axis until the
        // measured reaction along that axis matches the commanded magnitude.
        let mut delta = cmd.delta_translation;
        if cmd.force.norm() > 0.0 {
            let axis = Unit::new_normalize(cmd.force);
            let magnitude = cmd.force.norm();
            let reaction = -self.ee.contact_force.dot(&axis);
            if reaction < magnitude {
                delta += axis.into_inner() * self.config.creep_rate;
            }
        }

        let mut target_pos = self.ee.position + delta;
        let mut target_rot = apply_delta_rotation(&cmd.delta_rotation, &self.ee.rotation);

        if self.grasp.is_some() {
            self.resolve_grasped_motion(&mut target_pos, &mut target_rot, &delta);
        } else {
            self.resolve_free_motion(&mut target_pos);
        }

        // Track the arm; update the EE strictly from forward kinematics so
        // the FK-consistency invariant holds by construction.
        match ik_track(&self.ee.joints, &target_pos, &target_rot) {
            Ok(result) => {
                self.ee.joints = result.q;
                let (p, r) = fk(&result.q)?;
                self.ee.position = p;
                self.ee.rotation = r;
            }
            Err(Error::Unreachable { .. }) => {
                // Commanded outside the workspace: hold position this substep.
            }
            Err(e) => return Err(e),
        }

        self.settle_mechanisms(&target_pos);
        Ok(())
    }

    fn apply_gripper(&mut self, action: GripperAction) {
        match action {
            GripperAction::Open => {
                self.ee.gripper_width =
                    (self.ee.gripper_width + self.config.gripper_rate).min(GRIPPER_MAX_WIDTH);
                self.grasp = None;
            }
            GripperAction::Close => {
                self.ee.gripper_width = (self.ee.gripper_width - self.config.gripper_rate).max(0.0);
                if self.grasp.is_none() {
                    self.try_latch_grasp();
                }
            }
            GripperAction::Hold => {}
        }
    }

    fn try_latch_grasp(&mut self) {
        let Variation::Door(v) = &self.scene.variation else {
            return;
        };
        if v.lever_thickness > self.config.grasp_aperture {
            return;
        }
        let shaft_end = self.scene.door_shaft_end();
        let lever_dir = self.scene.door_lever_dir();
        let along = (self.ee.position - shaft_end)
            .dot(&lever_dir)
            .clamp(0.0, v.lever_length);
        let closest = shaft_end + lever_dir.into_inner() * along;
        if (self.ee.position - closest).norm() <= self.config.grasp_radius {
            self.grasp = Some(Grasp { along });
            self.ee.gripper_width = v.lever_thickness;
        }
    }

    /// While grasped, commanded translation is resolved onto the handle's
    /// two joints by least squares; the hinge column is dropped while the
    /// lock is engaged (θ ≤ 1.22).
    fn resolve_grasped_motion(&mut self, target_pos: &mut Vec3, target_rot: &mut Rot3, delta: &Vec3) {
        let Some(grasp) = self.grasp else { return };
        let JointState::Door { theta, phi } = self.scene.joints else {
            return;
        };
        let Variation::Door(v) = &self.scene.variation else {
            return;
        };
        let hinge = Vector3::new(v.hinge_xy[0], v.hinge_xy[1], 0.0);
        let shaft = self.scene.door_panel_normal();
        let lever_dir = self.scene.door_lever_dir();
        let attach = self.scene.door_shaft_end() + lever_dir.into_inner() * grasp.along;

        // Jacobian columns of the attach point w.r.t. (θ, φ).
        let col_theta = shaft.cross(&(lever_dir.into_inner() * grasp.along));
        let col_phi = -Vector3::z().cross(&(attach - hinge));
        let unlocked = theta > DOOR_LOCK_THETA;
        let mut j = Matrix3x2::zeros();
        j.set_column(0, &col_theta);
        if unlocked {
            j.set_column(1, &col_phi);
        }
        let jt = j.transpose();
        let mut normal = jt * j;
        normal[(0, 0)] += 1e-9;
        normal[(1, 1)] += 1e-9;
        let w: Vector2<f64> = normal
            .try_inverse()
            .map(|inv| inv * (jt * delta))
            .unwrap_or_else(Vector2::zeros);

        let d_theta = w[0].clamp(-THETA_RATE_MAX, THETA_RATE_MAX);
        let d_phi = if unlocked {
            w[1].clamp(-PHI_RATE_MAX, PHI_RATE_MAX)
        } else {
            0.0
        };
        let new_theta = (theta + d_theta).clamp(0.0, THETA_MAX);
        let new_phi = (phi + d_phi).clamp(0.0, PHI_MAX);
        self.scene.joints = JointState::Door {
            theta: new_theta,
            phi: new_phi,
        };

        // The EE follows the attach point rigidly; its orientation follows
        // the handle's net rotation.
        let new_attach =
            self.scene.door_shaft_end() + self.scene.door_lever_dir().into_inner() * grasp.along;
        let achieved = new_attach - attach;
        let residual = delta - achieved;
        self.ee.contact_force = -residual * self.config.contact_stiffness;
        *target_pos = new_attach;
        let handle_rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -(new_phi - phi))
            * Rotation3::from_axis_angle(&shaft, new_theta - theta);
        *target_rot = handle_rot * *target_rot;
    }

    /// Collision projection against task bodies for the ungrasped case, plus
    /// button plunger yield and ground clearance.
    fn resolve_free_motion(&mut self, target_pos: &mut Vec3) {
        // Ground plane.
        target_pos.z = target_pos.z.max(0.005 + EE_RADIUS);

        match &self.scene.variation {
            Variation::Button(v) => {
                let JointState::Button { j } = self.scene.joints else {
                    return;
                };
                // Plunger yield: pressing down on the cap advances j rather
                // than blocking, up to the travel limit.
                let center = self.scene.button_top_center();
                let in_radius = ((target_pos.x - center.x).powi(2)
                    + (target_pos.y - center.y).powi(2))
                .sqrt()
                    < v.button_radius + EE_RADIUS * 0.5;
                if in_radius {
                    let tip = target_pos.z - EE_RADIUS;
                    let rest_top = self.scene.button_box_top() + v.button_exposed;
                    let needed = rest_top - tip;
                    if needed > j {
                        let new_j = needed.min(v.travel);
                        self.scene.joints = JointState::Button { j: new_j };
                        if needed > v.travel {
                            // Bottomed out: the cap becomes a hard surface.
                            target_pos.z = rest_top - v.travel + EE_RADIUS;
                        }
                    }
                }
                // The box is rigid everywhere.
                self.project_out_of_static_bodies(target_pos, &[1]);
            }
            Variation::Block(_) => {
                // Penetration into the block is allowed (bounded) — contact
                // forces from it drive the tumble in `settle_mechanisms`.
                let pose = self.scene.block_pose();
                let local = pose.inverse_transform_point(target_pos);
                let bodies = self.scene.bodies();
                let sd = bodies[0].shape.signed_distance(&local) - EE_RADIUS;
                if sd < -MAX_PENETRATION {
                    let n = surface_normal(&bodies[0], target_pos);
                    *target_pos += n.into_inner() * (-sd - MAX_PENETRATION);
                }
            }
            Variation::Door(_) => {
                // Panel and frame are rigid; the lever yields by rotating
                // (handled in `settle_mechanisms`).
                self.project_out_of_static_bodies(target_pos, &[1, 4]);
            }
        }
    }

    fn project_out_of_static_bodies(&self, target_pos: &mut Vec3, ids: &[u32]) {
        for body in self.scene.bodies().iter().filter(|b| ids.contains(&b.id)) {
            let sd = body.signed_distance_world(target_pos) - EE_RADIUS;
            if sd < -MAX_PENETRATION {
                let n = surface_normal(body, target_pos);
                *target_pos += n.into_inner() * (-sd - MAX_PENETRATION);
            }
        }
    }

    /// Post-IK mechanism integration driven by the achieved EE position:
    /// contact forces, block tumble moment balance, lever contact moments,
    /// spring returns.
    fn settle_mechanisms(&mut self, _commanded: &Vec3) {
        if self.grasp.is_some() {
            // Contact force was set during grasp resolution.
            return;
        }
        let mut force_on_ee = Vec3::zeros();
        match &self.scene.variation {
            Variation::Button(v) => {
                let JointState::Button { j } = self.scene.joints else {
                    return;
                };
                let center = self.scene.button_top_center();
                let pressing = ((self.ee.position.x - center.x).powi(2)
                    + (self.ee.position.y - center.y).powi(2))
                .sqrt()
                    < v.button_radius + EE_RADIUS * 0.5
                    && self.ee.position.z - EE_RADIUS <= center.z + 1e-4;
                if pressing && j > 0.0 {
                    force_on_ee += Vector3::new(0.0, 0.0, PLUNGER_SPRING * j);
                } else if j > 0.0 {
                    // Spring return when unloaded.
                    self.scene.joints = JointState::Button {
                        j: (j - PLUNGER_RETURN).max(0.0),
                    };
                }
                // Box reaction.
                let bodies = self.scene.bodies();
                force_on_ee += penalty_force(&bodies[0], &self.ee.position, self.config.contact_stiffness);
            }
            Variation::Block(v) => {
                let JointState::Block { psi } = self.scene.joints else {
                    return;
                };
                let bodies = self.scene.bodies();
                let block = &bodies[0];
                let reaction = penalty_force(block, &self.ee.position, self.config.contact_stiffness);
                force_on_ee += reaction;

                // Static moment balance about the support edge.
                let mass = BLOCK_DENSITY * v.edge.powi(3);
                let weight = mass * GRAVITY;
                let m_ref = weight * v.edge / 2.0;
                let pivot = self.scene.block_pivot();
                let axis = self.scene.block_tumble_axis();
                let mut m_net = 0.0;
                if reaction.norm() > 0.0 {
                    let contact = contact_point(block, &self.ee.position);
                    let applied = -reaction; // force exerted on the block
                    m_net += (contact - pivot).cross(&applied).dot(&axis);
                }
                // Gravity moment: restoring below 45°, toppling above.
                let center = self.scene.block_pose().translation;
                let gravity = Vector3::new(0.0, 0.0, -weight);
                m_net += (center - pivot).cross(&gravity).dot(&axis);

                let rate = (m_net / (0.1 * m_ref)).clamp(-1.0, 1.0) * BLOCK_OMEGA_MAX;
                let new_psi = (psi + rate).clamp(0.0, std::f64::consts::FRAC_PI_2);
                if new_psi != psi {
                    self.scene.joints = JointState::Block { psi: new_psi };
                }
            }
            Variation::Door(v) => {
                let JointState::Door { theta, phi } = self.scene.joints else {
                    return;
                };
                let bodies = self.scene.bodies();
                // Rigid parts: panel (1) and frame (4).
                for body in bodies.iter().filter(|b| b.id == 1 || b.id == 4) {
                    force_on_ee += penalty_force(body, &self.ee.position, self.config.contact_stiffness);
                }
                // Lever contact turns the handle (slip-press without grasp).
                let lever = bodies.iter().find(|b| b.id == 3).expect("lever body");
                let reaction = penalty_force(lever, &self.ee.position, self.config.contact_stiffness);
                let new_theta;
                if reaction.norm() > 0.0 {
                    force_on_ee += reaction;
                    let contact = contact_point(lever, &self.ee.position);
                    let applied = -reaction;
                    let shaft = self.scene.door_panel_normal();
                    let m_theta = (contact - self.scene.door_shaft_end())
                        .cross(&applied)
                        .dot(&shaft);
                    // Lever yields along the moment, scaled by a nominal
                    // 1 N·m-to-full-rate stiffness.
                    let rate = (m_theta / 0.05).clamp(-1.0, 1.0) * THETA_RATE_MAX;
                    new_theta = (theta + rate).clamp(0.0, THETA_MAX);
                } else {
                    // Spring return toward the horizontal rest pose.
                    new_theta = (theta - HANDLE_RETURN).max(0.0);
                }
                if new_theta != theta {
                    self.scene.joints = JointState::Door {
                        theta: new_theta,
                        phi,
                    };
                }
                let _ = v;
            }
        }
        self.ee.contact_force = force_on_ee;
    }
}

/// Outward surface normal of `body` at the closest surface point to `world`.
fn surface_normal(body: &crate::sim::scene::Body, world: &Vec3) -> UnitVec3 {
    let local = body.pose.inverse_transform_point(world);
    let eps = 1e-6;
    let mut grad = Vec3::zeros();
    for k in 0..3 {
        let mut lo = local;
        let mut hi = local;
        lo[k] -= eps;
        hi[k] += eps;
        grad[k] = (body.shape.signed_distance(&hi) - body.shape.signed_distance(&lo)) / (2.0 * eps);
    }
    let world_grad = body.pose.rotation * grad;
    Unit::try_new(world_grad, 1e-12).unwrap_or_else(|| Unit::new_unchecked(Vector3::z()))
}

/// Closest point on the body surface to `world` (approximate, via the
/// signed-distance gradient).
fn contact_point(body: &crate::sim::scene::Body, world: &Vec3) -> Vec3 {
    let local = body.pose.inverse_transform_point(world);
    let sd = body.shape.signed_distance(&local);
    let n = surface_normal(body, world);
    world - n.into_inner() * sd
}

/// Penalty-spring reaction on a sphere of radius [`EE_RADIUS`] at `world`:
/// `k_c · penetration · n̂`, zero when separated.
fn penalty_force(body: &crate::sim::scene::Body, world: &Vec3, stiffness: f64) -> Vec3 {
    let local = body.pose.inverse_transform_point(world);
    let sd = body.shape.signed_distance(&local) - EE_RADIUS;
    if sd >= 0.0 {
        return Vec3::zeros();
    }
    let depth = (-sd).min(MAX_PENETRATION);
    surface_normal(body, world).into_inner() * (stiffness * depth)
}
