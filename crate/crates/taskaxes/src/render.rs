//! Analytic ray-cast renderer for the task scenes: feature images (shaded
//! procedural albedo), depth maps, per-body masks, body-frame coordinate
//! maps, and ground-truth cross-view pixel correspondences for descriptor
//! training.
//!
//! Shading is Lambertian with one fixed directional light. Per-body albedo
//! (sampled per variation) is modulated by a monotone gradient over the
//! body-frame hit coordinates, so every surface point has a locally unique
//! color — the texture signal dense-descriptor training needs.

use crate::geom::{CameraModel, PixelCoord, Vec3};
use crate::sim::scene::{Body, SceneModel, Shape};
use crate::{Error, Result};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Depth value written for background pixels.
pub const BACKGROUND_DEPTH: f64 = f64::INFINITY;
/// Mask id for background pixels.
pub const BACKGROUND_ID: u32 = 0;

/// Fixed directional light (pointing from the light toward the scene).
const LIGHT_DIR: [f64; 3] = [-0.35, 0.25, -0.9];
const AMBIENT: f64 = 0.3;

/// One rendered view with all supervision channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// Row-major H×W×3, values in [0, 1].
    pub feature: Vec<f64>,
    /// Row-major H×W; [`BACKGROUND_DEPTH`] where no body was hit.
    pub depth: Vec<f64>,
    /// Row-major H×W body ids; [`BACKGROUND_ID`] = background.
    pub mask: Vec<u32>,
    /// Row-major H×W×3 body-frame hit coordinates (zeros on background).
    pub body_coords: Vec<f64>,
    pub camera: CameraModel,
}

impl RenderedView {
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn mask_at(&self, x: usize, y: usize) -> u32 {
        self.mask[self.pixel_index(x, y)]
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[self.pixel_index(x, y)]
    }

    pub fn body_coord_at(&self, x: usize, y: usize) -> Vec3 {
        let i = self.pixel_index(x, y) * 3;
        Vector3::new(
            self.body_coords[i],
            self.body_coords[i + 1],
            self.body_coords[i + 2],
        )
    }

    /// All pixels whose mask is on some body.
    pub fn object_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.mask_at(x, y) != BACKGROUND_ID {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// A ground-truth pixel correspondence between two views. Pixels are
/// continuous coordinates at pixel centers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrespondencePair {
    pub pixel_a: PixelCoord,
    pub pixel_b: PixelCoord,
    pub valid: bool,
}

/// Ray-shape intersection in the body frame: returns (t, local point,
/// local outward normal) for the nearest hit with `t > 1e-9`.
fn intersect_local(shape: &Shape, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, Vec3)> {
    match shape {
        Shape::Box { half } => {
            // Slab method.
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0;
            for k in 0..3 {
                if dir[k].abs() < 1e-12 {
                    if origin[k].abs() > half[k] {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (-half[k] - origin[k]) / dir[k];
                let mut t1 = (half[k] - origin[k]) / dir[k];
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    near_axis = k;
                }
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return None;
                }
            }
            let t = if t_near > 1e-9 { t_near } else { t_far };
            if t <= 1e-9 {
                return None;
            }
            let p = origin + dir * t;
            let mut n = Vec3::zeros();
            n[near_axis] = p[near_axis].signum();
            Some((t, p, n))
        }
        Shape::Cylinder {
            radius,
            half_height,
        } => {
            let mut best: Option<(f64, Vec3, Vec3)> = None;
            let mut consider = |t: f64, p: Vec3, n: Vec3| {
                if t > 1e-9 && best.map_or(true, |(bt, _, _)| t < bt) {
                    best = Some((t, p, n));
                }
            };
            // Side surface: (ox + t dx)² + (oy + t dy)² = r².
            let a = dir.x * dir.x + dir.y * dir.y;
            if a > 1e-14 {
                let b = 2.0 * (origin.x * dir.x + origin.y * dir.y);
                let c = origin.x * origin.x + origin.y * origin.y - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                        let p = origin + dir * t;
                        if p.z.abs() <= *half_height {
                            let n = Vector3::new(p.x, p.y, 0.0) / *radius;
                            consider(t, p, n);
                        }
                    }
                }
            }
            // Caps at z = ±half_height.
            if dir.z.abs() > 1e-12 {
                for sign in [-1.0, 1.0] {
                    let t = (sign * half_height - origin.z) / dir.z;
                    let p = origin + dir * t;
                    if p.x * p.x + p.y * p.y <= radius * radius {
                        consider(t, p, Vector3::new(0.0, 0.0, sign));
                    }
                }
            }
            best
        }
    }
}

/// Procedural per-point albedo: the body's base color modulated by a
/// monotone ramp over normalized body-frame coordinates.
fn surface_albedo(body: &Body, local: &Vec3) -> [f64; 3] {
    let ext = body.shape.bounding_half_extents();
    let mut out = [0.0; 3];
    for k in 0..3 {
        let t = (0.5 + local[k] / (2.0 * ext[k].max(1e-6))).clamp(0.0, 1.0);
        out[k] = (body.albedo[k] * (0.4 + 0.6 * t)).clamp(0.0, 1.0);
    }
    out
}

/// Background shading: a soft vertical sky/ground gradient from the ray
/// direction (deterministic, never masked).
fn background_color(dir: &Vec3) -> [f64; 3] {
    let t = (0.5 + 0.5 * dir.z).clamp(0.0, 1.0);
    [0.12 + 0.10 * t, 0.12 + 0.12 * t, 0.14 + 0.16 * t]
}

/// Nearest body hit along a world-frame ray: (t, body, local point, local
/// normal).
fn first_hit<'a>(
    bodies: &'a [Body],
    origin: &Vec3,
    dir: &Vec3,
) -> Option<(f64, &'a Body, Vec3, Vec3)> {
    let mut best: Option<(f64, &Body, Vec3, Vec3)> = None;
    for body in bodies {
        let local_origin = body.pose.inverse_transform_point(origin);
        let local_dir = body.pose.rotation.inverse() * dir;
        if let Some((t, p, n)) = intersect_local(&body.shape, &local_origin, &local_dir) {
            if best.as_ref().map_or(true, |(bt, ..)| t < *bt) {
                best = Some((t, body, p, n));
            }
        }
    }
    best
}

/// Ray-casts one continuous pixel against a body list: (body id, body-frame
/// hit point). Ground truth for correspondence verification.
pub fn cast_pixel(bodies: &[Body], camera: &CameraModel, pixel: &PixelCoord) -> Option<(u32, Vec3)> {
    let (origin, dir) = camera.pixel_ray(pixel);
    first_hit(bodies, &origin, &dir.into_inner()).map(|(_, body, local, _)| (body.id, local))
}

/// Ray-casts a body list. Exposed for tests; [`render_view`] is the
/// scene-level entry point.
pub fn render_bodies(bodies: &[Body], camera: &CameraModel) -> Result<RenderedView> {
    let (w, h) = (camera.width, camera.height);
    if w == 0 || h == 0 {
        return Err(Error::Render("zero-sized image".into()));
    }
    let light = Vector3::new(LIGHT_DIR[0], LIGHT_DIR[1], LIGHT_DIR[2]).normalize();
    let mut view = RenderedView {
        width: w,
        height: h,
        feature: vec![0.0; w * h * 3],
        depth: vec![BACKGROUND_DEPTH; w * h],
        mask: vec![BACKGROUND_ID; w * h],
        body_coords: vec![0.0; w * h * 3],
        camera: camera.clone(),
    };
    for y in 0..h {
        for x in 0..w {
            let pixel = PixelCoord::new(x as f64 + 0.5, y as f64 + 0.5);
            let (origin, dir) = camera.pixel_ray(&pixel);
            let dir = dir.into_inner();
            let best = first_hit(bodies, &origin, &dir);
            let idx = y * w + x;
            let rgb = match best {
                Some((t, body, local, local_n)) => {
                    let world_n = body.pose.rotation * local_n;
                    let diffuse = world_n.dot(&-light).max(0.0);
                    let shade = AMBIENT + (1.0 - AMBIENT) * diffuse;
                    let albedo = surface_albedo(body, &local);
                    // Depth is the camera-frame z of the hit point, matching
                    // the projection convention.
                    let world_p = origin + dir * t;
                    let z = camera.world_to_camera(&world_p).z;
                    view.depth[idx] = z;
                    view.mask[idx] = body.id;
                    view.body_coords[idx * 3] = local.x;
                    view.body_coords[idx * 3 + 1] = local.y;
                    view.body_coords[idx * 3 + 2] = local.z;
                    [
                        (albedo[0] * shade).clamp(0.0, 1.0),
                        (albedo[1] * shade).clamp(0.0, 1.0),
                        (albedo[2] * shade).clamp(0.0, 1.0),
                    ]
                }
                None => background_color(&dir),
            };
            view.feature[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
        }
    }
    Ok(view)
}

/// Renders all bodies of a scene from one camera.
pub fn render_view(scene: &SceneModel, camera: &CameraModel) -> Result<RenderedView> {
    render_bodies(&scene.bodies(), camera)
}

/// Absolute depth tolerance of the visibility test. Inverse depth is affine
/// in pixel coordinates on planar faces, so bilinear interpolation is exact
/// there; the budget covers cylinder curvature across one pixel.
const DEPTH_VIS_TOL: f64 = 2.5e-3;

/// Meters one pixel spans at camera depth `z` (worst axis).
fn pixel_footprint(camera: &CameraModel, z: f64) -> f64 {
    z / camera.fx.min(camera.fy)
}

/// Conservative visibility test from stored channels only: a world point at
/// continuous `pixel` / camera depth `z`, known to lie on `body_id` at
/// body-frame `local`, is declared visible when every contributing neighbor
/// pixel shows the same body, bilinear inverse-depth interpolation
/// reproduces `z`, and the nearest stored body coordinate is within one
/// slanted pixel footprint. Declaring a visible point occluded (silhouette,
/// grazing incidence) is acceptable; the reverse is not.
fn point_visible(
    view: &RenderedView,
    pixel: &PixelCoord,
    z: f64,
    body_id: u32,
    local: &Vec3,
) -> bool {
    // Grid coordinates where integers sit on pixel centers.
    let gx = pixel.x - 0.5;
    let gy = pixel.y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let weights = [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ];
    let mut inv_z = 0.0;
    for (dx, dy, w) in weights {
        if w <= 0.0 {
            continue;
        }
        let nx = x0 as isize + dx;
        let ny = y0 as isize + dy;
        if nx < 0 || ny < 0 || nx as usize >= view.width || ny as usize >= view.height {
            return false;
        }
        let (nx, ny) = (nx as usize, ny as usize);
        if view.mask_at(nx, ny) != body_id {
            return false;
        }
        inv_z += w / view.depth_at(nx, ny);
    }
    let z_est = 1.0 / inv_z;
    if (z_est - z).abs() > DEPTH_VIS_TOL {
        return false;
    }
    // Same-surface check against the nearest stored coordinate: a visible
    // point sits within ~0.71 px of it, i.e. within a slope-scaled footprint.
    let nx = (gx.round() as isize).clamp(0, view.width as isize - 1) as usize;
    let ny = (gy.round() as isize).clamp(0, view.height as isize - 1) as usize;
    let stored = view.body_coord_at(nx, ny);
    (stored - local).norm() <= 1.5 * pixel_footprint(&view.camera, z) + 5e-4
}

/// Samples `n` on-object pixels of view A and maps them into view B by
/// back-projecting through A's depth and reprojecting with B's camera.
/// B pixels are continuous (subpixel); occluded or off-image targets are
/// flagged invalid. Both views must show the same scene instant.
pub fn correspondences(
    a: &RenderedView,
    b: &RenderedView,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<CorrespondencePair> {
    let on_object = a.object_pixels();
    if on_object.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (ax, ay) = on_object[rng.gen_range(0..on_object.len())];
        let pixel_a = PixelCoord::new(ax as f64 + 0.5, ay as f64 + 0.5);
        let world = match a
            .camera
            .backproject_pixel(&pixel_a, a.depth_at(ax, ay))
        {
            Ok(w) => w,
            Err(_) => continue,
        };
        let (pixel_b, valid) = match b.camera.project_point(&world) {
            Ok((p, z)) => {
                let visible = point_visible(
                    b,
                    &p,
                    z,
                    a.mask_at(ax, ay),
                    &a.body_coord_at(ax, ay),
                );
                (p, visible)
            }
            Err(_) => (PixelCoord::new(-1.0, -1.0), false),
        };
        out.push(CorrespondencePair {
            pixel_a,
            pixel_b,
            valid,
        });
    }
    out
}

/// Samples a look-at camera on the workspace hemisphere: radius 0.5–1.0 m,
/// elevation 20°–70°, any azimuth, aimed at `focus`.
pub fn sample_camera(
    focus: &Vec3,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<CameraModel> {
    let radius = rng.gen_range(0.5..1.0);
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let elevation = rng.gen_range(20f64.to_radians()..70f64.to_radians());
    let eye = focus
        + Vector3::new(
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        );
    CameraModel::look_at(
        eye,
        *focus,
        Vector3::new(0.0, 0.0, 1.0),
        60f64.to_radians(),
        width,
        height,
    )
}

/// Samples `count` hemisphere cameras pairwise at least 20° apart
/// (view-direction angle), by rejection.
pub fn sample_camera_set(
    focus: &Vec3,
    count: usize,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CameraModel>> {
    let min_cos = 20f64.to_radians().cos();
    let mut cams: Vec<CameraModel> = Vec::with_capacity(count);
    let mut attempts = 0;
    while cams.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Render(format!(
                "could not place {count} cameras ≥20° apart"
            )));
        }
        let cam = sample_camera(focus, width, height, rng)?;
        let dir = (focus - cam.position).normalize();
        let too_close = cams.iter().any(|c| {
            let d = (focus - c.position).normalize();
            d.dot(&dir) > min_cos
        });
        if !too_close {
            cams.push(cam);
        }
    }
    Ok(cams)
}

// ---- disk dataset -------------------------------------------------------

const VIEW_MAGIC: &[u8; 8] = b"TAXVIEW1";

/// Writes a view as a binary blob: magic, u32 JSON header (camera + dims),
/// then feature/depth/body-coords as little-endian f64 and mask as u32.
pub fn save_view(path: &Path, view: &RenderedView) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        width: usize,
        height: usize,
        camera: &'a CameraModel,
    }
    let json = serde_json::to_vec(&Header {
        width: view.width,
        height: view.height,
        camera: &view.camera,
    })?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(VIEW_MAGIC)?;
    f.write_all(&(json.len() as u32).to_le_bytes())?;
    f.write_all(&json)?;
    for v in view.feature.iter().chain(&view.depth).chain(&view.body_coords) {
        f.write_all(&v.to_le_bytes())?;
    }
    for m in &view.mask {
        f.write_all(&m.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_view(path: &Path) -> Result<RenderedView> {
    #[derive(Deserialize)]
    struct Header {
        width: usize,
        height: usize,
        camera: CameraModel,
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != VIEW_MAGIC {
        return Err(Error::Render(format!("{} is not a view blob", path.display())));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(
        bytes
            .get(12..12 + json_len)
            .ok_or_else(|| Error::Render("truncated view header".into()))?,
    )?;
    let (w, h) = (header.width, header.height);
    let n_f64 = w * h * 3 + w * h + w * h * 3;
    let mut offset = 12 + json_len;
    let read_f64 = |count: usize, offset: &mut usize| -> Result<Vec<f64>> {
        let end = *offset + count * 8;
        let chunk = bytes
            .get(*offset..end)
            .ok_or_else(|| Error::Render("truncated view data".into()))?;
        *offset = end;
        Ok(chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let feature = read_f64(w * h * 3, &mut offset)?;
    let depth = read_f64(w * h, &mut offset)?;
    let body_coords = read_f64(w * h * 3, &mut offset)?;
    let _ = n_f64;
    let mask_end = offset + w * h * 4;
    let mask_bytes = bytes
        .get(offset..mask_end)
        .ok_or_else(|| Error::Render("truncated mask".into()))?;
    let mask = mask_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RenderedView {
        width: w,
        height: h,
        feature,
        depth,
        mask,
        body_coords,
        camera: header.camera,
    })
}

/// Writes the feature image as an 8-bit PNG (debug/plot output).
pub fn save_feature_png(path: &Path, view: &RenderedView) -> Result<()> {
    let mut img = image::RgbImage::new(view.width as u32, view.height as u32);
    for y in 0..view.height {
        for x in 0..view.width {
            let i = (y * view.width + x) * 3;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (view.feature[i] * 255.0).round() as u8,
                    (view.feature[i + 1] * 255.0).round() as u8,
                    (view.feature[i + 2] * 255.0).round() as u8,
                ]),
            );
        }
    }
    img.save(path).map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::CameraModel;
    use crate::sim::scene::{Pose, SceneModel, TaskFamily};
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn unit_box_at(center: Vec3, half: f64) -> Body {
        Body {
            id: 1,
            name: "box".into(),
            shape: Shape::Box {
                half: Vector3::new(half, half, half),
            },
            pose: Pose {
                rotation: Rotation3::identity(),
                translation: center,
            },
            albedo: [0.8, 0.5, 0.3],
        }
    }

    fn camera_looking_at(eye: Vec3, target: Vec3, w: usize, h: usize) -> CameraModel {
        // Fall back to +x up when looking straight along the z axis.
        let dir = (target - eye).normalize();
        let up = if dir.z.abs() > 0.99 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        };
        CameraModel::look_at(eye, target, up, 60f64.to_radians(), w, h).unwrap()
    }

    #[test]
    fn center_pixel_depth_matches_ray_box_oracle() {
        // Box centered on the optical axis: center-pixel depth equals
        // camera distance minus the half extent.
        let center = Vector3::new(0.5, 0.0, 0.2);
        let eye = Vector3::new(0.5, 0.0, 1.0);
        let body = unit_box_at(center, 0.05);
        let cam = camera_looking_at(eye, center, 65, 65);
        let view = render_bodies(&[body], &cam).unwrap();
        let mid = 32;
        assert_eq!(view.mask_at(mid, mid), 1);
        assert_relative_eq!(view.depth_at(mid, mid), 0.8 - 0.05, epsilon = 1e-6);
    }

    #[test]
    fn empty_scene_all_background() {
        let cam = camera_looking_at(
            Vector3::new(0.5, 0.0, 1.0),
            Vector3::new(0.5, 0.0, 0.0),
            32,
            32,
        );
        let view = render_bodies(&[], &cam).unwrap();
        assert!(view.mask.iter().all(|&m| m == BACKGROUND_ID));
        assert!(view.depth.iter().all(|&d| d == BACKGROUND_DEPTH));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(1);
        let scene = SceneModel::sample(TaskFamily::DoorOpen, &mut rng);
        let cam = sample_camera(&scene.focus_point(), 48, 48, &mut rng).unwrap();
        let a = render_view(&scene, &cam).unwrap();
        let b = render_view(&scene, &cam).unwrap();
        assert_eq!(a.feature, b.feature);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.body_coords, b.body_coords);
    }

    #[test]
    fn mask_depth_consistency() {
        let mut rng = StdRng::seed_from_u64(2);
        for family in [
            TaskFamily::Button,
            TaskFamily::BlockTumble,
            TaskFamily::DoorOpen,
        ] {
            let scene = SceneModel::sample(family, &mut rng);
            let cam = sample_camera(&scene.focus_point(), 64, 64, &mut rng).unwrap();
            let view = render_view(&scene, &cam).unwrap();
            for i in 0..view.mask.len() {
                if view.mask[i] != BACKGROUND_ID {
                    assert!(view.depth[i].is_finite() && view.depth[i] > 0.0);
                } else {
                    assert_eq!(view.depth[i], BACKGROUND_DEPTH);
                }
            }
            // Some object pixels must exist when aimed at the focus point.
            assert!(!view.object_pixels().is_empty());
        }
    }

    #[test]
    fn coordinate_map_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        let scene = SceneModel::sample(TaskFamily::BlockTumble, &mut rng);
        let bodies = scene.bodies();
        let cam = sample_camera(&scene.focus_point(), 64, 64, &mut rng).unwrap();
        let view = render_view(&scene, &cam).unwrap();
        let mut checked = 0;
        for (x, y) in view.object_pixels() {
            let id = view.mask_at(x, y);
            let body = bodies.iter().find(|b| b.id == id).unwrap();
            let pixel = PixelCoord::new(x as f64 + 0.5, y as f64 + 0.5);
            let world = view
                .camera
                .backproject_pixel(&pixel, view.depth_at(x, y))
                .unwrap();
            let local = body.pose.inverse_transform_point(&world);
            assert!(
                (local - view.body_coord_at(x, y)).norm() < 1e-5,
                "round trip off at ({x},{y})"
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn identity_correspondences() {
        let mut rng = StdRng::seed_from_u64(4);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let cam = sample_camera(&scene.focus_point(), 64, 64, &mut rng).unwrap();
        let view = render_view(&scene, &cam).unwrap();
        let pairs = correspondences(&view, &view, 50, &mut rng);
        assert_eq!(pairs.len(), 50);
        for p in pairs {
            assert!(p.valid);
            assert_relative_eq!(p.pixel_a.x, p.pixel_b.x, epsilon = 1e-6);
            assert_relative_eq!(p.pixel_a.y, p.pixel_b.y, epsilon = 1e-6);
        }
    }

    #[test]
    fn horizontal_shift_matches_projection_oracle() {
        // Fronto-parallel plane (thin box) and a purely horizontal camera
        // translation: every correspondence shifts by fx·Δx/z.
        let plane_center = Vector3::new(0.0, 0.0, 0.5);
        let plane = Body {
            id: 7,
            name: "plane".into(),
            shape: Shape::Box {
                half: Vector3::new(2.0, 2.0, 0.01),
            },
            pose: Pose {
                rotation: Rotation3::identity(),
                translation: plane_center,
            },
            albedo: [0.5, 0.5, 0.5],
        };
        let make_cam = |ex: f64| {
            // Look straight down from above; up along +x keeps the frames
            // axis-aligned and identical between the two cameras.
            CameraModel::look_at(
                Vector3::new(ex, 0.0, 1.5),
                Vector3::new(ex, 0.0, 0.5),
                Vector3::new(1.0, 0.0, 0.0),
                60f64.to_radians(),
                64,
                64,
            )
            .unwrap()
        };
        let cam_a = make_cam(0.0);
        let dx = 0.08;
        let cam_b = make_cam(dx);
        let va = render_bodies(&[plane.clone()], &cam_a).unwrap();
        let vb = render_bodies(&[plane], &cam_b).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let pairs = correspondences(&va, &vb, 200, &mut rng);
        let depth = 1.5 - 0.5 - 0.01; // camera height minus plane top
        // With up = +x the camera's image-y axis is world −x, so translating
        // the camera by +dx shifts projections by +fy·dx/z in image y.
        let expected_shift = cam_a.fy * dx / depth;
        let mut checked = 0;
        for p in pairs.iter().filter(|p| p.valid) {
            assert_relative_eq!(p.pixel_b.y - p.pixel_a.y, expected_shift, epsilon = 1e-6);
            assert_relative_eq!(p.pixel_b.x, p.pixel_a.x, epsilon = 1e-6);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn occluded_target_flagged_invalid() {
        // View A sees the +x face of a box; view B from the opposite side
        // cannot: every A-face point is occluded by the box body itself.
        let center = Vector3::new(0.0, 0.0, 0.5);
        let body = unit_box_at(center, 0.1);
        let cam_a = camera_looking_at(Vector3::new(1.0, 0.0, 0.5), center, 48, 48);
        let cam_b = camera_looking_at(Vector3::new(-1.0, 0.0, 0.5), center, 48, 48);
        let va = render_bodies(&[body.clone()], &cam_a).unwrap();
        let vb = render_bodies(&[body], &cam_b).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        let pairs = correspondences(&va, &vb, 100, &mut rng);
        // A few silhouette pixels may see the rim; the overwhelming
        // majority must be invalid.
        let invalid = pairs.iter().filter(|p| !p.valid).count();
        assert!(invalid > 90, "only {invalid}/100 flagged invalid");
    }

    #[test]
    fn valid_pairs_agree_within_two_millimeters() {
        // Oracle: recast view B's camera through the continuous target pixel
        // and demand the exact hit match view A's body-frame point.
        let mut rng = StdRng::seed_from_u64(7);
        let mut total_valid = 0;
        for family in [
            TaskFamily::Button,
            TaskFamily::BlockTumble,
            TaskFamily::DoorOpen,
        ] {
            for _ in 0..5 {
                let scene = SceneModel::sample(family, &mut rng);
                let bodies = scene.bodies();
                let cams =
                    sample_camera_set(&scene.focus_point(), 2, 64, 64, &mut rng).unwrap();
                let va = render_view(&scene, &cams[0]).unwrap();
                let vb = render_view(&scene, &cams[1]).unwrap();
                for p in correspondences(&va, &vb, 2500, &mut rng) {
                    if !p.valid {
                        continue;
                    }
                    let (ax, ay) = (p.pixel_a.x as usize, p.pixel_a.y as usize);
                    let la = va.body_coord_at(ax, ay);
                    let (hit_id, lb) =
                        cast_pixel(&bodies, &vb.camera, &p.pixel_b).expect("valid pair missed");
                    assert_eq!(hit_id, va.mask_at(ax, ay), "{family:?}: wrong body");
                    assert!(
                        (la - lb).norm() < 2e-3,
                        "{family:?}: {} mm apart",
                        (la - lb).norm() * 1e3
                    );
                    total_valid += 1;
                }
            }
        }
        assert!(total_valid > 10_000, "only {total_valid} valid pairs checked");
    }

    #[test]
    fn camera_set_views_are_separated() {
        let mut rng = StdRng::seed_from_u64(8);
        let focus = Vector3::new(0.5, 0.0, 0.1);
        let cams = sample_camera_set(&focus, 5, 32, 32, &mut rng).unwrap();
        for i in 0..cams.len() {
            for j in i + 1..cams.len() {
                let di = (focus - cams[i].position).normalize();
                let dj = (focus - cams[j].position).normalize();
                assert!(di.dot(&dj) <= 20f64.to_radians().cos() + 1e-12);
            }
        }
    }

    #[test]
    fn view_blob_round_trip() {
        let mut rng = StdRng::seed_from_u64(9);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let cam = sample_camera(&scene.focus_point(), 32, 32, &mut rng).unwrap();
        let view = render_view(&scene, &cam).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("view.bin");
        save_view(&path, &view).unwrap();
        let loaded = load_view(&path).unwrap();
        assert_eq!(view.feature, loaded.feature);
        assert_eq!(view.depth, loaded.depth);
        assert_eq!(view.mask, loaded.mask);
        assert_eq!(view.body_coords, loaded.body_coords);
    }

    #[test]
    fn cylinder_intersection_closed_form() {
        // Ray along −z onto a cylinder cap hits at distance (z0 − hh).
        let shape = Shape::Cylinder {
            radius: 0.05,
            half_height: 0.2,
        };
        let origin = Vector3::new(0.01, 0.0, 1.0);
        let dir = Vector3::new(0.0, 0.0, -1.0);
        let (t, p, n) = intersect_local(&shape, &origin, &dir).unwrap();
        assert_relative_eq!(t, 0.8, epsilon = 1e-12);
        assert_relative_eq!(p.z, 0.2, epsilon = 1e-12);
        assert_relative_eq!(n.z, 1.0, epsilon = 1e-12);
        // Ray along −x onto the side wall.
        let origin = Vector3::new(1.0, 0.0, 0.0);
        let dir = Vector3::new(-1.0, 0.0, 0.0);
        let (t, _, n) = intersect_local(&shape, &origin, &dir).unwrap();
        assert_relative_eq!(t, 0.95, epsilon = 1e-12);
        assert_relative_eq!(n.x, 1.0, epsilon = 1e-12);
    }
}
