//! Pinhole cameras, ray generation, ray/box intersection, and the sampling
//! of points along rays.
//!
//! Conventions: image coordinates are (u, v) = (row, column) with the ray
//! for a pixel passing through its center, i.e. offset +0.5 from the integer
//! coordinates. The camera looks down +z in its own frame, x points right
//! (columns), y points down (rows). Extrinsics are camera-to-world rigid
//! transforms.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// A ray in world space. `direction` is unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    /// (row, column) of the pixel this ray belongs to.
    pub pixel: (usize, usize),
}

/// JSON wire format: flattened row-major 4x4 matrices.
#[derive(Serialize, Deserialize)]
struct CameraRecord {
    intrinsic: Vec<f64>,
    extrinsic: Vec<f64>,
    width: usize,
    height: usize,
}

impl From<Camera> for CameraRecord {
    fn from(cam: Camera) -> Self {
        CameraRecord {
            intrinsic: cam.intrinsic.transpose().as_slice().to_vec(),
            extrinsic: cam.extrinsic.transpose().as_slice().to_vec(),
            width: cam.width,
            height: cam.height,
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(rec: CameraRecord) -> Result<Self> {
        ensure!(
            rec.intrinsic.len() == 16 && rec.extrinsic.len() == 16,
            "camera matrices must have 16 entries, got {} and {}",
            rec.intrinsic.len(),
            rec.extrinsic.len()
        );
        // nalgebra's from_row_slice matches the row-major wire layout.
        let intrinsic = Matrix4::from_row_slice(&rec.intrinsic);
        let extrinsic = Matrix4::from_row_slice(&rec.extrinsic);
        Camera::new(intrinsic, extrinsic, rec.width, rec.height)
    }
}

/// A pinhole camera: 4x4 intrinsic matrix (pinhole K in the upper-left 3x3),
/// camera-to-world extrinsic, and image size in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    intrinsic: Matrix4<f64>,
    extrinsic: Matrix4<f64>,
    width: usize,
    height: usize,
}

impl Camera {
    /// Validates and wraps camera matrices. The extrinsic must be a rigid
    /// camera-to-world transform: orthonormal rotation (to 1e-6), unit
    /// determinant, bottom row (0, 0, 0, 1). Focal lengths must be positive.
    /// Only fx, fy, cx, cy of the intrinsic are used; skew is not supported.
    pub fn new(
        intrinsic: Matrix4<f64>,
        extrinsic: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        ensure!(width >= 1 && height >= 1, "image size must be >= 1x1, got {width}x{height}");
        ensure!(
            intrinsic.iter().all(|v| v.is_finite()) && extrinsic.iter().all(|v| v.is_finite()),
            "camera matrices must be finite"
        );
        let fx = intrinsic[(0, 0)];
        let fy = intrinsic[(1, 1)];
        ensure!(fx > 0.0 && fy > 0.0, "focal lengths must be positive, got fx={fx}, fy={fy}");
        let r = extrinsic.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        ensure!(
            ortho_err <= 1e-6,
            "extrinsic rotation is not orthonormal (max deviation {ortho_err:.3e})"
        );
        let det = r.determinant();
        ensure!(
            (det - 1.0).abs() <= 1e-6,
            "extrinsic rotation must have determinant +1, got {det}"
        );
        let bottom = extrinsic.row(3);
        ensure!(
            (bottom - Vector4::new(0.0, 0.0, 0.0, 1.0).transpose()).abs().max() <= 1e-9,
            "extrinsic bottom row must be (0, 0, 0, 1)"
        );
        Ok(Camera { intrinsic, extrinsic, width, height })
    }

    /// Builds a camera from pinhole parameters and an extrinsic matrix.
    pub fn from_pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let mut k = Matrix4::identity();
        k[(0, 0)] = fx;
        k[(1, 1)] = fy;
        k[(0, 2)] = cx;
        k[(1, 2)] = cy;
        Camera::new(k, extrinsic, width, height)
    }

    /// Places a camera at `eye` looking toward `target`, with `up` fixing the
    /// roll. The camera +y axis (image rows) points away from `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - eye;
        ensure!(forward.norm() > 1e-12, "look_at target coincides with eye");
        let z = forward.normalize();
        let x_dir = z.cross(&up);
        ensure!(x_dir.norm() > 1e-12, "look_at direction is parallel to up");
        let x = x_dir.normalize();
        let y = z.cross(&x);
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 1>(0, 0).copy_from(&x);
        ext.fixed_view_mut::<3, 1>(0, 1).copy_from(&y);
        ext.fixed_view_mut::<3, 1>(0, 2).copy_from(&z);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Camera::from_pinhole(fx, fy, cx, cy, ext, width, height)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn intrinsic(&self) -> &Matrix4<f64> {
        &self.intrinsic
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }

    pub fn fx(&self) -> f64 {
        self.intrinsic[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsic[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsic[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsic[(1, 2)]
    }

    /// Camera-to-world rotation.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera position in world space.
    pub fn position(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-space origin and unit direction of the ray through continuous
    /// image coordinates (u, v). Pixel centers are at integer + 0.5.
    pub fn ray_at(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = Vector3::new(
            (v + 0.5 - self.cx()) / self.fx(),
            (u + 0.5 - self.cy()) / self.fy(),
            1.0,
        );
        let dir = (self.rotation() * dir_cam).normalize();
        (self.position(), dir)
    }

    /// The ray through the center of pixel (u, v) = (row, column).
    pub fn pixel_ray(&self, u: usize, v: usize) -> Ray {
        debug_assert!(u < self.height && v < self.width);
        let (origin, direction) = self.ray_at(u as f64, v as f64);
        Ray { origin, direction, pixel: (u, v) }
    }

    /// All pixel rays in row-major order: index `u * width + v`.
    pub fn rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.num_pixels());
        for u in 0..self.height {
            for v in 0..self.width {
                out.push(self.pixel_ray(u, v));
            }
        }
        out
    }

    /// Projects a world point to continuous pixel coordinates (u, v), or
    /// `None` when the point is not strictly in front of the camera.
    pub fn project(&self, p: Vector3<f64>) -> Option<(f64, f64)> {
        let cam = self.rotation().transpose() * (p - self.position());
        if cam.z <= 1e-12 {
            return None;
        }
        let v = self.fx() * cam.x / cam.z + self.cx() - 0.5;
        let u = self.fy() * cam.y / cam.z + self.cy() - 0.5;
        Some((u, v))
    }
}

/// Intersects a ray with an axis-aligned box, returning the parameter
/// interval `(t_near, t_far)` with `t_near` clamped to 0, or `None` when the
/// box is missed or lies entirely behind the origin.
pub fn ray_aabb(
    ray: &Ray,
    aabb_min: Vector3<f64>,
    aabb_max: Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-300 {
            if o < aabb_min[a] || o > aabb_max[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d;
            let ta = (aabb_min[a] - o) * inv;
            let tb = (aabb_max[a] - o) * inv;
            let (lo, hi) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
    }
    if t1 >= t0 {
        Some((t0, t1))
    } else {
        None
    }
}

/// How points are placed along rays: fixed step size, a cap on the number of
/// samples per ray, and a near clip distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub step_size: f64,
    pub max_samples: usize,
    pub near: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { step_size: 0.4, max_samples: 192, near: 0.0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.step_size.is_finite() && self.step_size > 0.0,
            "step_size must be positive and finite, got {}",
            self.step_size
        );
        ensure!(self.max_samples >= 1, "max_samples must be >= 1");
        ensure!(self.near.is_finite() && self.near >= 0.0, "near must be >= 0, got {}", self.near);
        Ok(())
    }
}

/// Sample distances and positions for one ray, restricted to its overlap
/// with `aabb`. Points sit at bin midpoints: `t_start + (k + 0.5) * step`.
/// Rays that miss the box (or whose overlap is shorter than one step) get
/// no samples.
pub fn get_points(
    ray: &Ray,
    cfg: &SamplingConfig,
    aabb_min: Vector3<f64>,
    aabb_max: Vector3<f64>,
) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let Some((t_near, t_far)) = ray_aabb(ray, aabb_min, aabb_max) else {
        return (Vec::new(), Vec::new());
    };
    let t_start = t_near.max(cfg.near);
    let span = t_far - t_start;
    if span < cfg.step_size {
        return (Vec::new(), Vec::new());
    }
    let count = ((span / cfg.step_size).floor() as usize).min(cfg.max_samples);
    let mut distances = Vec::with_capacity(count);
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let t = t_start + (k as f64 + 0.5) * cfg.step_size;
        distances.push(t);
        points.push(ray.origin + ray.direction * t);
    }
    (distances, points)
}

/// Chooses `count` distinct ray indices out of `0..num_rays` uniformly at
/// random, returned in ascending order. Fully determined by `seed` (ChaCha8
/// keyed with the seed). When `count >= num_rays` all indices are returned.
pub fn sample_ray_subset(num_rays: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(num_rays > 0, "cannot sample from an empty ray set");
    ensure!(count > 0, "subset size must be >= 1");
    if count >= num_rays {
        return Ok((0..num_rays).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, num_rays, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Loads cameras from a JSON file holding either a single camera object or
/// an array of them.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let cams: Vec<Camera> = if value.is_array() {
        serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?
    } else {
        vec![serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?]
    };
    if cams.is_empty() {
        return Err(Error::parse(path, "camera file holds an empty array"));
    }
    Ok(cams)
}

/// Writes cameras as a JSON array (matching [`load_cameras`]).
pub fn save_cameras(cams: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure!(!cams.is_empty(), "refusing to write an empty camera file");
    let text = serde_json::to_string_pretty(cams)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
