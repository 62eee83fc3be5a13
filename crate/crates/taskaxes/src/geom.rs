//! Minimal 3D geometry kernel.
//!
//! Vectors, rotations, axis projections, angle-axis deltas and pinhole-camera
//! back-projection. Everything here is immutable after construction and safe
//! to share across threads.
//!
//! Rotations are stored as orthonormal matrices ([`Rot3`]); the matrix view is
//! the external contract. [`reorthonormalize`] repairs drift accumulated by
//! long composition chains.

use crate::{Error, Result};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

/// 3D vector in meters (or unitless for directions).
pub type Vec3 = Vector3<f64>;

/// Unit-norm direction vector.
pub type UnitVec3 = Unit<Vec3>;

/// Rotation matrix in SO(3).
pub type Rot3 = Rotation3<f64>;

/// Unit-norm tolerance used by invariant checks.
pub const UNIT_TOL: f64 = 1e-9;

/// A rotation delta in angle-axis form. `angle` is in radians, `axis` unit-norm.
#[derive(Debug, Clone, Copy)]
pub struct AngleAxis {
    pub axis: UnitVec3,
    pub angle: f64,
}

impl AngleAxis {
    pub fn zero() -> Self {
        AngleAxis {
            axis: Unit::new_unchecked(Vector3::x()),
            angle: 0.0,
        }
    }

    /// Rotation vector `angle * axis`.
    pub fn to_vector(&self) -> Vec3 {
        self.axis.into_inner() * self.angle
    }

    /// Builds an angle-axis from a rotation vector; zero-length maps to zero rotation.
    pub fn from_vector(v: Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-15 {
            AngleAxis::zero()
        } else {
            AngleAxis {
                axis: Unit::new_unchecked(v / angle),
                angle,
            }
        }
    }
}

/// Projects `v` onto the axis `u`: `P(u) v = (u·v) u` with `P(u) = u uᵀ`.
pub fn project_onto_axis(u: &UnitVec3, v: &Vec3) -> Vec3 {
    u.into_inner() * u.dot(v)
}

/// Removes the component of `v` along `u`: `(I − P(u)) v`.
pub fn reject_from_axis(u: &UnitVec3, v: &Vec3) -> Vec3 {
    v - project_onto_axis(u, v)
}

/// Deterministic unit vector orthogonal to `a`.
///
/// Takes the basis vector with the smallest index that is not `a`'s
/// largest-magnitude component, and removes its component along `a`.
pub fn orthogonal_to(a: &UnitVec3) -> UnitVec3 {
    let v = a.into_inner();
    let abs = [v.x.abs(), v.y.abs(), v.z.abs()];
    let mut largest = 0;
    for i in 1..3 {
        if abs[i] > abs[largest] {
            largest = i;
        }
    }
    let j = if largest == 0 { 1 } else { 0 };
    let mut e = Vector3::zeros();
    e[j] = 1.0;
    let rejected = e - v * v.dot(&e);
    Unit::new_normalize(rejected)
}

/// Minimal rotation taking `a` onto `b`.
///
/// Angle is `acos(aᵀb) ∈ [0, π]`; the axis is the normalized cross product.
/// Antiparallel inputs have no unique axis; a deterministic axis orthogonal
/// to `a` is returned with angle π.
pub fn rotation_between(a: &UnitVec3, b: &UnitVec3) -> AngleAxis {
    let dot = a.dot(b).clamp(-1.0, 1.0);
    if dot <= -1.0 + UNIT_TOL {
        return AngleAxis {
            axis: orthogonal_to(a),
            angle: std::f64::consts::PI,
        };
    }
    let cross = a.cross(b);
    let cross_norm = cross.norm();
    if cross_norm < 1e-15 {
        return AngleAxis::zero();
    }
    AngleAxis {
        axis: Unit::new_unchecked(cross / cross_norm),
        angle: dot.acos(),
    }
}

/// Applies a delta rotation on the left: `exp([d]×) · R`.
pub fn apply_delta_rotation(d: &AngleAxis, r: &Rot3) -> Rot3 {
    if d.angle == 0.0 {
        return *r;
    }
    Rotation3::from_axis_angle(&d.axis, d.angle) * r
}

/// Projects a rotation matrix back onto SO(3) (nearest orthonormal matrix).
pub fn reorthonormalize(r: &Rot3) -> Rot3 {
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(r);
    q.to_rotation_matrix()
}

/// Frobenius distance of `RᵀR` from the identity; a drift measure.
pub fn orthonormality_error(r: &Rot3) -> f64 {
    let m = r.matrix();
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// Sub-pixel image coordinate. `x` grows rightward, `y` downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        PixelCoord { x, y }
    }
}

/// Pinhole camera: intrinsics plus a camera-to-world pose.
///
/// Camera frame convention: +z forward (optical axis), +x right (image x),
/// +y down (image y). A world point `p` maps to camera coordinates through
/// `Rᵀ (p − t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world rotation.
    pub rotation: Rot3,
    /// Camera position in the world frame.
    pub position: Vec3,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Rot3,
        position: Vec3,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            position,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` as the world up hint.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y_rad: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("view direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
            right, down, forward,
        ]));
        let fy = height as f64 / (2.0 * (fov_y_rad / 2.0).tan());
        Ok(CameraModel {
            fx: fy,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            position: eye,
        })
    }

    fn pixel_in_image(&self, p: &PixelCoord) -> bool {
        p.x >= 0.0 && p.x < self.width as f64 && p.y >= 0.0 && p.y < self.height as f64
    }

    /// World-frame point of pixel `p` at camera depth `depth` (meters, > 0).
    pub fn backproject_pixel(&self, p: &PixelCoord, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::InvalidBackprojection(format!(
                "depth must be positive, got {depth}"
            )));
        }
        if !self.pixel_in_image(p) {
            return Err(Error::InvalidBackprojection(format!(
                "pixel ({}, {}) outside {}x{} image",
                p.x, p.y, self.width, self.height
            )));
        }
        let cam = Vector3::new(
            (p.x - self.cx) * depth / self.fx,
            (p.y - self.cy) * depth / self.fy,
            depth,
        );
        Ok(self.rotation * cam + self.position)
    }

    /// World point to camera-frame coordinates.
    pub fn world_to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation.inverse() * (world - self.position)
    }

    /// Projects a world point; returns the pixel and the camera depth.
    /// Points at or behind the camera plane are an error.
    pub fn project_point(&self, world: &Vec3) -> Result<(PixelCoord, f64)> {
        let cam = self.world_to_camera(world);
        if cam.z <= 1e-9 {
            return Err(Error::InvalidBackprojection(format!(
                "point behind camera (z = {})",
                cam.z
            )));
        }
        Ok((
            PixelCoord::new(
                self.fx * cam.x / cam.z + self.cx,
                self.fy * cam.y / cam.z + self.cy,
            ),
            cam.z,
        ))
    }

    /// Ray through pixel `p`: returns (origin, unit direction) in world frame.
    pub fn pixel_ray(&self, p: &PixelCoord) -> (Vec3, UnitVec3) {
        let dir_cam = Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0);
        let dir_world = Unit::new_normalize(self.rotation * dir_cam);
        (self.position, dir_world)
    }
}
