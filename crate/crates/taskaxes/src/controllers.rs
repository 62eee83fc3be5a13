//! Task-axes controller library.
//!
//! A controller is a small attractor defined by object-centric parameters —
//! a target point `x_d`, an axis `u`, a desired force `f_d` or a target
//! direction `r_d` — and computes a per-step [`Command`] from the current
//! end-effector state. Position controllers move along a single axis:
//!
//! ```text
//! δ_x(x_d, u, x_c) = 𝒫(u) (x_d − x_c),   𝒫(u) = u uᵀ
//! ```
//!
//! where `u` is either fixed or recomputed each step from the error
//! direction. Several active commands combine through null-space projection
//! so lower-priority motion never disturbs higher-priority axes.

use crate::geom::{
    apply_delta_rotation, project_onto_axis, reject_from_axis, rotation_between, AngleAxis, Rot3,
    UnitVec3, Vec3,
};
use crate::sim::EEState;
use crate::{Error, Result};
use nalgebra::Unit;
use serde::{Deserialize, Serialize};

/// Default translation step bound per sim substep (meters).
pub const DEFAULT_MAX_TRANS_STEP: f64 = 0.01;
/// Default rotation step bound per sim substep (radians).
pub const DEFAULT_MAX_ROT_STEP: f64 = 0.05;
/// Default force-controller magnitude (newtons).
pub const DEFAULT_FORCE_MAGNITUDE: f64 = 5.0;
/// Default curl angular increment per step (radians).
pub const DEFAULT_CURL_STEP: f64 = 0.05;
/// Position errors below this are treated as converged.
pub const CONVERGENCE_EPS: f64 = 1e-6;
/// Distance at which a force controller's approach phase hands over to the
/// force phase (meters). Larger than the end-effector contact radius, so
/// surface keypoints remain reachable.
pub const FORCE_APPROACH_TOL: f64 = 0.02;

/// Proportional / derivative / integral gains.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
    pub ki: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Gains {
            kp: 1.0,
            kd: 0.1,
            ki: 0.0,
        }
    }
}

impl Gains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp > 0.0 && self.kd >= 0.0 && self.ki >= 0.0)
            || !(self.kp.is_finite() && self.kd.is_finite() && self.ki.is_finite())
        {
            return Err(Error::InvalidControllerSpec(format!(
                "gains must satisfy K_p > 0, K_d ≥ 0, K_i ≥ 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Gripper channel of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GripperAction {
    Open,
    Close,
    Hold,
}

/// Controller family plus the parameters that family needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Move toward `x_d`, but only along the fixed axis `u`.
    PositionFixedAxis { target: Vec3, axis: UnitVec3 },
    /// Move straight toward `x_d`; the axis is the current error direction.
    PositionErrorAxis { target: Vec3 },
    /// Orbit the line through `center` along `axis` at a fixed angular rate,
    /// keeping the orbit radius constant.
    CurlAttractor {
        center: Vec3,
        axis: UnitVec3,
        angle_step: f64,
    },
    /// Exert `magnitude` newtons along `axis`; no commanded motion. When
    /// `approach` is set, the controller first moves to that point (like
    /// [`ControllerKind::PositionErrorAxis`]) and applies the force only
    /// once within [`FORCE_APPROACH_TOL`] of it.
    Force {
        magnitude: f64,
        axis: UnitVec3,
        approach: Option<Vec3>,
    },
    /// Rotate so that the end-effector body axis `ee_axis_selector`
    /// (expressed in the world as `R_c·selector`) aligns with `target`.
    Rotation {
        ee_axis_selector: UnitVec3,
        target: UnitVec3,
    },
    GripperOpen,
    GripperClose,
}

impl ControllerKind {
    /// Stable small integer used for deterministic controller ordering.
    pub fn order_tag(&self) -> u8 {
        match self {
            ControllerKind::GripperOpen => 0,
            ControllerKind::GripperClose => 1,
            ControllerKind::PositionErrorAxis { .. } => 2,
            ControllerKind::PositionFixedAxis { .. } => 3,
            ControllerKind::Rotation { .. } => 4,
            ControllerKind::CurlAttractor { .. } => 5,
            ControllerKind::Force { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::GripperOpen => "gripper_open",
            ControllerKind::GripperClose => "gripper_close",
            ControllerKind::PositionErrorAxis { .. } => "position_error_axis",
            ControllerKind::PositionFixedAxis { .. } => "position_fixed_axis",
            ControllerKind::Rotation { .. } => "rotation",
            ControllerKind::CurlAttractor { .. } => "curl",
            ControllerKind::Force { .. } => "force",
        }
    }
}

/// A fully parameterized controller.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub gains: Gains,
    /// Translation bound per step (meters).
    pub max_step_m: f64,
    /// Rotation bound per step (radians).
    pub max_step_rad: f64,
}

impl ControllerSpec {
    pub fn new(kind: ControllerKind) -> Self {
        ControllerSpec {
            kind,
            gains: Gains::default(),
            max_step_m: DEFAULT_MAX_TRANS_STEP,
            max_step_rad: DEFAULT_MAX_ROT_STEP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        if !(self.max_step_m > 0.0 && self.max_step_rad > 0.0) {
            return Err(Error::InvalidControllerSpec(format!(
                "step bounds must be positive, got {} m / {} rad",
                self.max_step_m, self.max_step_rad
            )));
        }
        match &self.kind {
            ControllerKind::Force { magnitude, .. } => {
                if !magnitude.is_finite() || *magnitude <= 0.0 {
                    return Err(Error::InvalidControllerSpec(format!(
                        "force magnitude must be positive, got {magnitude}"
                    )));
                }
            }
            ControllerKind::CurlAttractor { angle_step, .. } => {
                if !angle_step.is_finite() || *angle_step <= 0.0 {
                    return Err(Error::InvalidControllerSpec(format!(
                        "curl angle step must be positive, got {angle_step}"
                    )));
                }
            }
            ControllerKind::PositionFixedAxis { target, .. }
            | ControllerKind::PositionErrorAxis { target } => {
                if !target.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidControllerSpec(
                        "non-finite target point".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One-step motion/force/gripper command for the end-effector.
#[derive(Debug, Clone)]
pub struct Command {
    pub delta_translation: Vec3,
    pub delta_rotation: AngleAxis,
    /// Desired contact force (newtons, world frame).
    pub force: Vec3,
    pub gripper: GripperAction,
    /// Axis claimed by this command for null-space composition; `None` for
    /// commands that impose no translation constraint (gripper, converged).
    pub translation_axis_used: Option<UnitVec3>,
}

impl Command {
    pub fn zero() -> Self {
        Command {
            delta_translation: Vec3::zeros(),
            delta_rotation: AngleAxis::zero(),
            force: Vec3::zeros(),
            gripper: GripperAction::Hold,
            translation_axis_used: None,
        }
    }

    pub fn is_zero_motion(&self) -> bool {
        self.delta_translation.norm() == 0.0 && self.delta_rotation.angle == 0.0
    }
}

/// Integral / previous-error memory for [`pid_step`].
#[derive(Debug, Clone, Default)]
pub struct PidState {
    pub integral: Vec3,
    pub prev_error: Option<Vec3>,
}

/// One discrete PID update: `K_p·e + K_d·(e − e_prev)/dt + K_i·∫e dt`.
pub fn pid_step(gains: &Gains, error: Vec3, state: &PidState, dt: f64) -> (Vec3, PidState) {
    debug_assert!(dt > 0.0);
    let integral = state.integral + error * dt;
    let derivative = match state.prev_error {
        Some(prev) => (error - prev) / dt,
        None => Vec3::zeros(),
    };
    let out = error * gains.kp + derivative * gains.kd + integral * gains.ki;
    (
        out,
        PidState {
            integral,
            prev_error: Some(error),
        },
    )
}

fn clamp_norm(v: Vec3, max_norm: f64) -> Vec3 {
    let n = v.norm();
    if n > max_norm {
        v * (max_norm / n)
    } else {
        v
    }
}

/// Computes the per-step command for one controller given the current
/// end-effector state. Converged attractors yield a zero command.
pub fn compute_command(spec: &ControllerSpec, ee: &EEState) -> Result<Command> {
    spec.validate()?;
    let mut cmd = Command::zero();
    match &spec.kind {
        ControllerKind::PositionFixedAxis { target, axis } => {
            let raw = project_onto_axis(axis, &(target - ee.position)) * spec.gains.kp;
            cmd.delta_translation = clamp_norm(raw, spec.max_step_m);
            cmd.translation_axis_used = Some(*axis);
        }
        ControllerKind::PositionErrorAxis { target } => {
            let err = target - ee.position;
            let norm = err.norm();
            if norm >= CONVERGENCE_EPS {
                // 𝒫(u)(x_d − x_c) with u = err/‖err‖ is just the error itself.
                cmd.delta_translation = clamp_norm(err * spec.gains.kp, spec.max_step_m);
                cmd.translation_axis_used = Some(Unit::new_unchecked(err / norm));
            }
        }
        ControllerKind::CurlAttractor {
            center,
            axis,
            angle_step,
        } => {
            let rel = ee.position - center;
            let radius = reject_from_axis(axis, &rel).norm();
            if radius >= CONVERGENCE_EPS {
                let mut phi = (spec.gains.kp * angle_step).min(spec.max_step_rad);
                // Shrink the arc angle when the chord would exceed the
                // translation bound, keeping the orbit radius exact.
                let half_chord = spec.max_step_m / (2.0 * radius);
                if half_chord < (phi / 2.0).sin() {
                    phi = 2.0 * half_chord.min(1.0).asin();
                }
                let rot = apply_delta_rotation(
                    &AngleAxis {
                        axis: *axis,
                        angle: phi,
                    },
                    &Rot3::identity(),
                );
                let delta = rot * rel - rel;
                cmd.translation_axis_used =
                    Unit::try_new(delta, CONVERGENCE_EPS * CONVERGENCE_EPS);
                cmd.delta_translation = delta;
            }
        }
        ControllerKind::Force {
            magnitude,
            axis,
            approach,
        } => {
            let near = match approach {
                Some(point) => {
                    let err = point - ee.position;
                    if err.norm() > FORCE_APPROACH_TOL {
                        cmd.delta_translation = clamp_norm(err * spec.gains.kp, spec.max_step_m);
                        cmd.translation_axis_used = Unit::try_new(err, CONVERGENCE_EPS);
                        false
                    } else {
                        true
                    }
                }
                None => true,
            };
            if near {
                cmd.force = axis.into_inner() * *magnitude;
                cmd.translation_axis_used = Some(*axis);
            }
        }
        ControllerKind::Rotation {
            ee_axis_selector,
            target,
        } => {
            let current = Unit::new_normalize(ee.rotation * ee_axis_selector.into_inner());
            let d = rotation_between(&current, target);
            let angle = (spec.gains.kp * d.angle).min(spec.max_step_rad);
            if angle >= 1e-12 {
                cmd.delta_rotation = AngleAxis {
                    axis: d.axis,
                    angle,
                };
            }
        }
        ControllerKind::GripperOpen => cmd.gripper = GripperAction::Open,
        ControllerKind::GripperClose => cmd.gripper = GripperAction::Close,
    }
    Ok(cmd)
}

/// Composes prioritized commands with null-space projection:
///
/// ```text
/// Δ_total = Δ₁ + (I − 𝒫(u₁)) Δ₂ + (I − 𝒫(u₁))(I − 𝒫(u₂)) Δ₃ + …
/// ```
///
/// The same scheme applies to the force channel (axes taken from force
/// directions). Rotations are summed as rotation vectors and reduced to the
/// principal angle; the gripper is taken from the highest-priority non-hold
/// command. Step-bound clamping happens at execution time in the simulator.
pub fn compose_commands(ordered: &[Command]) -> Result<Command> {
    if ordered.is_empty() {
        return Err(Error::EmptyComposition);
    }
    let mut total = Command::zero();
    let mut trans_axes: Vec<UnitVec3> = Vec::new();
    let mut force_axes: Vec<UnitVec3> = Vec::new();
    let mut rot_vec = Vec3::zeros();

    for cmd in ordered {
        let mut t = cmd.delta_translation;
        for a in &trans_axes {
            t = reject_from_axis(a, &t);
        }
        total.delta_translation += t;
        if let Some(axis) = cmd.translation_axis_used {
            if total.translation_axis_used.is_none() {
                total.translation_axis_used = Some(axis);
            }
            trans_axes.push(axis);
        }

        let mut f = cmd.force;
        for a in &force_axes {
            f = reject_from_axis(a, &f);
        }
        total.force += f;
        if let Some(axis) = Unit::try_new(cmd.force, 1e-12) {
            force_axes.push(axis);
        }

        rot_vec += cmd.delta_rotation.to_vector();

        if total.gripper == GripperAction::Hold && cmd.gripper != GripperAction::Hold {
            total.gripper = cmd.gripper;
        }
    }

    total.delta_rotation = principal_angle_axis(AngleAxis::from_vector(rot_vec));
    Ok(total)
}

/// Reduces an angle-axis to its principal representative with angle ∈ [0, π].
fn principal_angle_axis(mut aa: AngleAxis) -> AngleAxis {
    use std::f64::consts::{PI, TAU};
    if aa.angle <= PI {
        return aa;
    }
    let wrapped = aa.angle.rem_euclid(TAU);
    if wrapped > PI {
        aa.axis = Unit::new_unchecked(-aa.axis.into_inner());
        aa.angle = TAU - wrapped;
    } else {
        aa.angle = wrapped;
    }
    aa
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn ee_at(position: Vec3) -> EEState {
        EEState {
            position,
            rotation: Rot3::identity(),
            contact_force: Vec3::zeros(),
            gripper_width: 0.08,
            joints: [0.0; 7],
        }
    }

    fn unit(x: f64, y: f64, z: f64) -> UnitVec3 {
        Unit::new_normalize(Vec3::new(x, y, z))
    }

    fn random_unit(rng: &mut StdRng) -> UnitVec3 {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 0.1 {
                return Unit::new_normalize(v);
            }
        }
    }

    #[test]
    fn error_axis_converged_is_zero() {
        let x = Vec3::new(0.4, -0.2, 0.3);
        let spec = ControllerSpec::new(ControllerKind::PositionErrorAxis { target: x });
        let cmd = compute_command(&spec, &ee_at(x)).unwrap();
        assert!(cmd.is_zero_motion());
        assert!(cmd.translation_axis_used.is_none());
    }

    #[test]
    fn force_constant_zero_motion() {
        let spec = ControllerSpec::new(ControllerKind::Force {
            magnitude: 5.0,
            axis: unit(0.0, 0.0, -1.0),
            approach: None,
        });
        let cmd = compute_command(&spec, &ee_at(Vec3::zeros())).unwrap();
        assert_relative_eq!(cmd.force, Vec3::new(0.0, 0.0, -5.0));
        assert!(cmd.is_zero_motion());
    }

    #[test]
    fn error_axis_normalize_and_clamp_oracle() {
        // x_d − x_c = (1,2,2) has norm 3; K_p=1, max_step=0.05
        // → translation 0.05·(1,2,2)/3.
        let target = Vec3::new(1.0, 2.0, 2.0);
        let mut spec = ControllerSpec::new(ControllerKind::PositionErrorAxis { target });
        spec.max_step_m = 0.05;
        let cmd = compute_command(&spec, &ee_at(Vec3::zeros())).unwrap();
        assert_relative_eq!(
            cmd.delta_translation,
            Vec3::new(1.0, 2.0, 2.0) * (0.05 / 3.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn fixed_axis_projects_error() {
        // Error (0.3, 0.4, 0) against axis e_x: only the x component remains,
        // then clamped to 0.01.
        let spec = ControllerSpec::new(ControllerKind::PositionFixedAxis {
            target: Vec3::new(0.3, 0.4, 0.0),
            axis: unit(1.0, 0.0, 0.0),
        });
        let cmd = compute_command(&spec, &ee_at(Vec3::zeros())).unwrap();
        assert_relative_eq!(cmd.delta_translation, Vec3::new(0.01, 0.0, 0.0));
    }

    #[test]
    fn pid_pure_proportional() {
        let gains = Gains {
            kp: 2.0,
            kd: 0.0,
            ki: 0.0,
        };
        let (out, _) = pid_step(&gains, Vec3::new(1.0, 0.0, 0.0), &PidState::default(), 0.02);
        assert_relative_eq!(out, Vec3::new(2.0, 0.0, 0.0));
        let (zero, _) = pid_step(&gains, Vec3::zeros(), &PidState::default(), 0.02);
        assert_relative_eq!(zero, Vec3::zeros());
    }

    #[test]
    fn pid_integral_accumulates_discrete_oracle() {
        // Constant error e over steps: output_n = K_p·e + K_i·n·dt·e.
        let gains = Gains {
            kp: 1.0,
            kd: 0.0,
            ki: 0.5,
        };
        let e = Vec3::new(0.2, 0.0, -0.1);
        let dt = 0.02;
        let mut state = PidState::default();
        let mut outputs = Vec::new();
        for _ in 0..3 {
            let (out, next) = pid_step(&gains, e, &state, dt);
            outputs.push(out);
            state = next;
        }
        for (n, out) in outputs.iter().enumerate() {
            let oracle = e * 1.0 + e * 0.5 * ((n + 1) as f64) * dt;
            assert_relative_eq!(*out, oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_single_identity() {
        let spec = ControllerSpec::new(ControllerKind::PositionErrorAxis {
            target: Vec3::new(0.1, 0.0, 0.0),
        });
        let cmd = compute_command(&spec, &ee_at(Vec3::zeros())).unwrap();
        let composed = compose_commands(std::slice::from_ref(&cmd)).unwrap();
        assert_relative_eq!(composed.delta_translation, cmd.delta_translation);
        assert_eq!(composed.gripper, cmd.gripper);
    }

    #[test]
    fn compose_orthogonal_sum_oracle() {
        // (I − 𝒫(e_x))·(0, b, 0) = (0, b, 0): orthogonal deltas add exactly.
        let a = Command {
            delta_translation: Vec3::new(0.01, 0.0, 0.0),
            translation_axis_used: Some(unit(1.0, 0.0, 0.0)),
            ..Command::zero()
        };
        let b = Command {
            delta_translation: Vec3::new(0.0, 0.008, 0.0),
            translation_axis_used: Some(unit(0.0, 1.0, 0.0)),
            ..Command::zero()
        };
        let composed = compose_commands(&[a, b]).unwrap();
        assert_relative_eq!(
            composed.delta_translation,
            Vec3::new(0.01, 0.008, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn compose_parallel_annihilated() {
        let a = Command {
            delta_translation: Vec3::new(0.01, 0.0, 0.0),
            translation_axis_used: Some(unit(1.0, 0.0, 0.0)),
            ..Command::zero()
        };
        let b = Command {
            delta_translation: Vec3::new(-0.005, 0.0, 0.0),
            translation_axis_used: Some(unit(1.0, 0.0, 0.0)),
            ..Command::zero()
        };
        let both = compose_commands(&[a.clone(), b]).unwrap();
        let only_a = compose_commands(&[a]).unwrap();
        assert_relative_eq!(both.delta_translation, only_a.delta_translation);
    }

    #[test]
    fn compose_empty_is_error() {
        assert!(matches!(
            compose_commands(&[]),
            Err(Error::EmptyComposition)
        ));
    }

    #[test]
    fn random_commands_respect_clamps() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..10_000 {
            let ee = ee_at(Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..1.5),
            ));
            let target = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..1.5),
            );
            let kind = match rng.gen_range(0..5) {
                0 => ControllerKind::PositionErrorAxis { target },
                1 => ControllerKind::PositionFixedAxis {
                    target,
                    axis: random_unit(&mut rng),
                },
                2 => ControllerKind::CurlAttractor {
                    center: target,
                    axis: random_unit(&mut rng),
                    angle_step: rng.gen_range(0.001..0.3),
                },
                3 => ControllerKind::Force {
                    magnitude: rng.gen_range(0.1..20.0),
                    axis: random_unit(&mut rng),
                    approach: None,
                },
                _ => ControllerKind::Rotation {
                    ee_axis_selector: random_unit(&mut rng),
                    target: random_unit(&mut rng),
                },
            };
            let mut spec = ControllerSpec::new(kind);
            spec.gains.kp = rng.gen_range(0.1..4.0);
            let cmd = compute_command(&spec, &ee).unwrap();
            assert!(
                cmd.delta_translation.norm() <= spec.max_step_m + 1e-12,
                "translation exceeded clamp: {:?}",
                cmd
            );
            assert!(cmd.delta_rotation.angle.abs() <= spec.max_step_rad + 1e-12);
        }
    }

    #[test]
    fn fixed_axis_lies_in_axis_span() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let axis = random_unit(&mut rng);
            let spec = ControllerSpec::new(ControllerKind::PositionFixedAxis {
                target: Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                axis,
            });
            let cmd = compute_command(&spec, &ee_at(Vec3::zeros())).unwrap();
            let residual = reject_from_axis(&axis, &cmd.delta_translation);
            assert!(residual.norm() < 1e-9);
        }
    }

    #[test]
    fn error_axis_iteration_converges() {
        let target = Vec3::new(0.3, -0.2, 0.5);
        let spec = ControllerSpec::new(ControllerKind::PositionErrorAxis { target });
        let mut pos = Vec3::new(-0.1, 0.4, 0.1);
        let mut prev_dist = (target - pos).norm();
        for _ in 0..200 {
            let cmd = compute_command(&spec, &ee_at(pos)).unwrap();
            pos += cmd.delta_translation;
            let dist = (target - pos).norm();
            if prev_dist >= spec.max_step_m {
                assert!(dist < prev_dist, "distance must strictly decrease");
            }
            if prev_dist < spec.max_step_m {
                // With K_p = 1 the final unclamped step lands exactly on x_d.
                assert!(dist < 1e-12, "expected one-step arrival, got {dist}");
                return;
            }
            prev_dist = dist;
        }
        panic!("did not converge in 200 steps");
    }

    #[test]
    fn rotation_fixed_point_iff_aligned() {
        let selector = unit(0.0, 0.0, 1.0);
        let aligned = ControllerSpec::new(ControllerKind::Rotation {
            ee_axis_selector: selector,
            target: unit(0.0, 0.0, 1.0),
        });
        let cmd = compute_command(&aligned, &ee_at(Vec3::zeros())).unwrap();
        assert_eq!(cmd.delta_rotation.angle, 0.0);

        let misaligned = ControllerSpec::new(ControllerKind::Rotation {
            ee_axis_selector: selector,
            target: unit(1.0, 0.0, 1.0),
        });
        let cmd = compute_command(&misaligned, &ee_at(Vec3::zeros())).unwrap();
        assert!(cmd.delta_rotation.angle > 1e-8);
    }

    #[test]
    fn rotation_iteration_aligns_axis() {
        let selector = unit(0.0, 0.0, 1.0);
        let target = unit(1.0, 0.2, -0.4);
        let spec = ControllerSpec::new(ControllerKind::Rotation {
            ee_axis_selector: selector,
            target,
        });
        let mut ee = ee_at(Vec3::zeros());
        for _ in 0..200 {
            let cmd = compute_command(&spec, &ee).unwrap();
            ee.rotation = apply_delta_rotation(&cmd.delta_rotation, &ee.rotation);
        }
        let achieved = ee.rotation * selector.into_inner();
        assert!((achieved - target.into_inner()).norm() < 1e-6);
    }

    #[test]
    fn curl_keeps_radius_constant() {
        let center = Vec3::new(0.5, 0.0, 0.3);
        let axis = unit(0.0, 0.0, 1.0);
        let spec = ControllerSpec::new(ControllerKind::CurlAttractor {
            center,
            axis,
            angle_step: DEFAULT_CURL_STEP,
        });
        let mut pos = center + Vec3::new(0.12, 0.0, 0.05);
        let r0 = reject_from_axis(&axis, &(pos - center)).norm();
        let z0 = (pos - center).dot(&axis);
        for _ in 0..300 {
            let cmd = compute_command(&spec, &ee_at(pos)).unwrap();
            pos += cmd.delta_translation;
            let rel = pos - center;
            assert_relative_eq!(reject_from_axis(&axis, &rel).norm(), r0, epsilon = 1e-9);
            assert_relative_eq!(rel.dot(&axis), z0, epsilon = 1e-9);
        }
    }

    #[test]
    fn object_centric_translation_invariance() {
        let mut rng = StdRng::seed_from_u64(123);
        for _ in 0..200 {
            let offset = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let pos = Vec3::new(0.1, 0.2, 0.3);
            let target = Vec3::new(0.4, -0.1, 0.6);
            let axis = random_unit(&mut rng);
            for kind_pair in [
                (
                    ControllerKind::PositionErrorAxis { target },
                    ControllerKind::PositionErrorAxis {
                        target: target + offset,
                    },
                ),
                (
                    ControllerKind::PositionFixedAxis { target, axis },
                    ControllerKind::PositionFixedAxis {
                        target: target + offset,
                        axis,
                    },
                ),
                (
                    ControllerKind::CurlAttractor {
                        center: target,
                        axis,
                        angle_step: 0.05,
                    },
                    ControllerKind::CurlAttractor {
                        center: target + offset,
                        axis,
                        angle_step: 0.05,
                    },
                ),
            ] {
                let base =
                    compute_command(&ControllerSpec::new(kind_pair.0), &ee_at(pos)).unwrap();
                let moved =
                    compute_command(&ControllerSpec::new(kind_pair.1), &ee_at(pos + offset))
                        .unwrap();
                assert!(
                    (base.delta_translation - moved.delta_translation).norm() < 1e-12,
                    "translation invariance violated"
                );
            }
        }
    }

    #[test]
    fn compose_rotation_principal_angle() {
        let big = Command {
            delta_rotation: AngleAxis {
                axis: unit(0.0, 0.0, 1.0),
                angle: 2.5,
            },
            ..Command::zero()
        };
        let composed = compose_commands(&[big.clone(), big]).unwrap();
        // 5.0 rad wraps to 2π − 5.0 about the flipped axis.
        assert_relative_eq!(
            composed.delta_rotation.angle,
            std::f64::consts::TAU - 5.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            composed.delta_rotation.axis.into_inner(),
            Vec3::new(0.0, 0.0, -1.0)
        );
    }
}
