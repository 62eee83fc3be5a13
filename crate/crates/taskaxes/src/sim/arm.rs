//! 7-DoF kinematic arm: forward kinematics, geometric Jacobian and
//! damped-least-squares inverse-kinematics tracking.
//!
//! The chain uses modified Denavit-Hartenberg parameters of a Franka-style
//! arm (link transform `Rot_x(α_{i−1}) · Trans_x(a_{i−1}) · Rot_z(θ_i) ·
//! Trans_z(d_i)`), with a fixed flange-plus-gripper transform so the tool
//! center point sits between the fingertips.

use crate::geom::{reorthonormalize, Rot3, Vec3};
use crate::{Error, Result};
use nalgebra::{Isometry3, Matrix6, Rotation3, SMatrix, SVector, Translation3, Vector3};

/// Link offsets along x (meters), indexed by joint.
pub const DH_A: [f64; 7] = [0.0, 0.0, 0.0, 0.0825, -0.0825, 0.0, 0.088];
/// Link offsets along z (meters).
pub const DH_D: [f64; 7] = [0.333, 0.0, 0.316, 0.0, 0.384, 0.0, 0.0];
/// Link twists (radians).
pub const DH_ALPHA: [f64; 7] = [
    0.0,
    -std::f64::consts::FRAC_PI_2,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::FRAC_PI_2,
    -std::f64::consts::FRAC_PI_2,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::FRAC_PI_2,
];
/// Flange offset plus gripper length to the grasp center (meters along z₇).
pub const TCP_OFFSET: f64 = 0.107 + 0.1034;

/// Symmetric joint limits (radians).
pub const JOINT_LIMIT: [f64; 7] = [2.8973, 1.7628, 2.8973, 3.0718, 2.8973, 3.7525, 2.8973];

/// Elbow-bent home configuration.
pub const Q_HOME: [f64; 7] = [
    0.0,
    -std::f64::consts::FRAC_PI_4,
    0.0,
    -2.356194490192345, // −3π/4
    0.0,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::FRAC_PI_4,
];

/// Conservative radius of the reachable sphere around the shoulder
/// (joint-2 origin at z = 0.333): total stretched link length.
pub const REACH_RADIUS: f64 = 0.316 + 0.384 + 0.0825 + 0.0825 + 0.088 + TCP_OFFSET;

/// Maximum gripper opening (meters).
pub const GRIPPER_MAX_WIDTH: f64 = 0.08;

/// Position tolerance for a converged IK step (meters).
pub const IK_POS_TOL: f64 = 1e-4;
/// Rotation tolerance for a converged IK step (radians).
pub const IK_ROT_TOL: f64 = 1e-3;

fn check_limits(q: &[f64; 7]) -> Result<()> {
    for (i, (&qi, &lim)) in q.iter().zip(JOINT_LIMIT.iter()).enumerate() {
        if !(qi >= -lim && qi <= lim) {
            return Err(Error::JointLimit {
                index: i,
                value: qi,
                min: -lim,
                max: lim,
            });
        }
    }
    Ok(())
}

fn clamp_limits(q: &mut [f64; 7]) {
    for (qi, &lim) in q.iter_mut().zip(JOINT_LIMIT.iter()) {
        *qi = qi.clamp(-lim, lim);
    }
}

fn link_transform(i: usize, theta: f64) -> Isometry3<f64> {
    let rot_alpha = Rotation3::from_axis_angle(&Vector3::x_axis(), DH_ALPHA[i]);
    let trans_a = Translation3::new(DH_A[i], 0.0, 0.0);
    let rot_theta = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
    let trans_d = Translation3::new(0.0, 0.0, DH_D[i]);
    Isometry3::from_parts(Translation3::identity(), rot_alpha.into())
        * Isometry3::from_parts(trans_a, nalgebra::UnitQuaternion::identity())
        * Isometry3::from_parts(Translation3::identity(), rot_theta.into())
        * Isometry3::from_parts(trans_d, nalgebra::UnitQuaternion::identity())
}

fn tcp_transform() -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::new(0.0, 0.0, TCP_OFFSET),
        nalgebra::UnitQuaternion::identity(),
    )
}

/// Forward kinematics: joint angles to TCP pose in the base frame.
pub fn fk(q: &[f64; 7]) -> Result<(Vec3, Rot3)> {
    check_limits(q)?;
    let mut t = Isometry3::identity();
    for (i, &qi) in q.iter().enumerate() {
        t *= link_transform(i, qi);
    }
    t *= tcp_transform();
    Ok((
        t.translation.vector,
        reorthonormalize(&t.rotation.to_rotation_matrix()),
    ))
}

/// Joint frames needed by the geometric Jacobian: world axis and origin of
/// every joint, plus the TCP position.
fn joint_frames(q: &[f64; 7]) -> ([Vec3; 7], [Vec3; 7], Vec3) {
    let mut axes = [Vec3::zeros(); 7];
    let mut origins = [Vec3::zeros(); 7];
    let mut t = Isometry3::identity();
    for (i, &qi) in q.iter().enumerate() {
        // Joint i rotates about the z axis of its own frame, positioned
        // after the α/a part of the link transform.
        let pre = t * Isometry3::from_parts(
            Translation3::identity(),
            Rotation3::from_axis_angle(&Vector3::x_axis(), DH_ALPHA[i]).into(),
        ) * Isometry3::from_parts(
            Translation3::new(DH_A[i], 0.0, 0.0),
            nalgebra::UnitQuaternion::identity(),
        );
        axes[i] = pre.rotation.to_rotation_matrix() * Vector3::z();
        origins[i] = pre.translation.vector;
        t *= link_transform(i, qi);
    }
    let tcp = (t * tcp_transform()).translation.vector;
    (axes, origins, tcp)
}

/// Geometric Jacobian (6×7): rows are linear velocity then angular velocity.
pub fn jacobian(q: &[f64; 7]) -> SMatrix<f64, 6, 7> {
    let (axes, origins, tcp) = joint_frames(q);
    let mut j = SMatrix::<f64, 6, 7>::zeros();
    for i in 0..7 {
        let lin = axes[i].cross(&(tcp - origins[i]));
        for r in 0..3 {
            j[(r, i)] = lin[r];
            j[(r + 3, i)] = axes[i][r];
        }
    }
    j
}

/// Outcome of one IK tracking call.
#[derive(Debug, Clone)]
pub struct IkResult {
    pub q: [f64; 7],
    pub pos_err: f64,
    pub rot_err: f64,
    /// True when both tolerances were met.
    pub converged: bool,
}

/// Damped-least-squares tracking of a nearby pose target.
///
/// Iterates `Δq = Jᵀ (J Jᵀ + λ² I)⁻¹ e` until the pose error is inside
/// tolerance. Targets outside the reachable sphere are an error carrying the
/// distance of closest approach; near-singular configurations return a
/// best-effort result with `converged = false`.
pub fn ik_track(q: &[f64; 7], target_pos: &Vec3, target_rot: &Rot3) -> Result<IkResult> {
    check_limits(q)?;
    let shoulder = Vec3::new(0.0, 0.0, DH_D[0]);
    let target_radius = (target_pos - shoulder).norm();
    if target_radius > REACH_RADIUS {
        return Err(Error::Unreachable {
            closest_approach: target_radius - REACH_RADIUS,
        });
    }

    let damping = 0.02;
    let mut cur = *q;
    let mut best = IkResult {
        q: cur,
        pos_err: f64::INFINITY,
        rot_err: f64::INFINITY,
        converged: false,
    };
    for _ in 0..60 {
        let (pos, rot) = fk(&cur)?;
        let pos_err_vec = target_pos - pos;
        let rot_err_vec = rotation_log(&(target_rot * rot.inverse()));
        let pos_err = pos_err_vec.norm();
        let rot_err = rot_err_vec.norm();
        if pos_err < best.pos_err {
            best = IkResult {
                q: cur,
                pos_err,
                rot_err,
                converged: false,
            };
        }
        if pos_err < IK_POS_TOL && rot_err < IK_ROT_TOL {
            return Ok(IkResult {
                q: cur,
                pos_err,
                rot_err,
                converged: true,
            });
        }
        let j = jacobian(&cur);
        let mut e = SVector::<f64, 6>::zeros();
        for r in 0..3 {
            e[r] = pos_err_vec[r];
            e[r + 3] = rot_err_vec[r];
        }
        let jjt = j * j.transpose() + Matrix6::identity() * damping * damping;
        let Some(inv) = jjt.try_inverse() else { break };
        let dq = j.transpose() * inv * e;
        for i in 0..7 {
            cur[i] += dq[i].clamp(-0.2, 0.2);
        }
        clamp_limits(&mut cur);
    }
    Ok(best)
}

/// Rotation-vector logarithm of a rotation matrix. Routed through the
/// quaternion log, which stays accurate for near-identity rotations where
/// the trace/acos form loses digits.
fn rotation_log(r: &Rot3) -> Vec3 {
    nalgebra::UnitQuaternion::from_rotation_matrix(r).scaled_axis()
}

/// True when a world point lies inside the conservative reachable sphere,
/// with `margin` meters to spare.
pub fn within_workspace(p: &Vec3, margin: f64) -> bool {
    let shoulder = Vec3::new(0.0, 0.0, DH_D[0]);
    (p - shoulder).norm() + margin <= REACH_RADIUS
}

/// Joint configuration whose TCP pose best matches (pos, rot), seeded from
/// the home pose; used when resetting episodes.
pub fn ik_from_home(target_pos: &Vec3, target_rot: &Rot3) -> Result<IkResult> {
    ik_track(&Q_HOME, target_pos, target_rot)
}
