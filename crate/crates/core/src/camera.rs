//! Camera models, rigid poses and projection.
//!
//! Conventions: poses are camera-to-world; the camera frame has +Z forward,
//! +X right and +Y down. Depth is always the Euclidean camera-to-point distance.
//! A pixel `(u, v)` covers `[u, u + 1) x [v, v + 1)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::scene_io::ImageRaster;

/// Maximum tolerated deviation of `R^T R` from identity, and of `det R` from 1.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("point coincides with the camera center")]
    AtCameraCenter,
    #[error("no visible points")]
    NoVisiblePoints,
    #[error("operation requires an equirectangular camera")]
    NotEquirectangular,
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:e})")]
    BadRotation(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CameraModel {
    Pinhole {
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    },
    Equirectangular {
        width: u32,
        height: u32,
    },
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), CameraError> {
        let (w, h) = self.size();
        if w == 0 || h == 0 {
            return Err(CameraError::BadIntrinsics(format!("raster {w}x{h}")));
        }
        if let CameraModel::Pinhole { fx, fy, cx, cy, .. } = *self {
            if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
                return Err(CameraError::BadIntrinsics(format!("focal ({fx}, {fy})")));
            }
            if !(0.0..w as f64).contains(&cx) || !(0.0..h as f64).contains(&cy) {
                return Err(CameraError::BadIntrinsics(format!(
                    "principal point ({cx}, {cy}) outside {w}x{h}"
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (u32, u32) {
        match *self {
            CameraModel::Pinhole { width, height, .. }
            | CameraModel::Equirectangular { width, height } => (width, height),
        }
    }

    pub fn is_equirectangular(&self) -> bool {
        matches!(self, CameraModel::Equirectangular { .. })
    }

    /// Pixels per radian near the optical axis; converts a metric splat size at
    /// a given distance into a pixel extent.
    pub fn pixel_scale(&self) -> f64 {
        match *self {
            CameraModel::Pinhole { fx, fy, .. } => 0.5 * (fx + fy),
            CameraModel::Equirectangular { width, .. } => width as f64 / TAU,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>) -> Result<Self, CameraError> {
        let dev = rotation_deviation(&rotation);
        if !(dev <= ROTATION_TOLERANCE) {
            return Err(CameraError::BadRotation(dev));
        }
        Ok(Self { rotation, position })
    }

    /// Camera at `eye` with +Z towards `target`; `up` hints the world direction
    /// that should appear towards the top of the image (camera -Y).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
            if x.norm() < 1e-9 {
                x = z.cross(&Vector3::new(0.0, 1.0, 0.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            position: eye,
        }
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.position))
    }

    pub fn camera_to_world_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }
}

/// `max(|R^T R - I|_inf, |det R - 1|)`.
pub fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let det = (r.determinant() - 1.0).abs();
    if ortho.is_nan() || det.is_nan() {
        return f64::INFINITY;
    }
    ortho.max(det)
}

/// Real-valued pixel coordinates and Euclidean depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Raster cell containing the projection, if inside `width x height`.
    pub fn pixel(&self, width: u32, height: u32) -> Option<(u32, u32)> {
        let (u, v) = (self.u.floor(), self.v.floor());
        (u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64)
            .then_some((u as u32, v as u32))
    }
}

/// A posed camera observing one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub image_id: u32,
    pub model: CameraModel,
    pub pose: Pose,
    /// Equirectangular only: integer column roll applied to the panorama.
    column_shift: i64,
}

impl CameraView {
    pub fn new(image_id: u32, model: CameraModel, pose: Pose) -> Result<Self, CameraError> {
        model.validate()?;
        Ok(Self {
            image_id,
            model,
            pose,
            column_shift: 0,
        })
    }

    pub fn size(&self) -> (u32, u32) {
        self.model.size()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.position
    }

    /// Columns the panorama is rolled by; `u_new = u_old - column_shift (mod W)`.
    pub fn column_shift(&self) -> i64 {
        self.column_shift
    }

    /// Azimuth (radians) that now projects to the panorama center column.
    pub fn rotation_offset(&self) -> f64 {
        match self.model {
            CameraModel::Equirectangular { width, .. } => {
                self.column_shift as f64 * TAU / width as f64
            }
            CameraModel::Pinhole { .. } => 0.0,
        }
    }

    pub fn project(&self, point: &[f64; 3]) -> Result<Projection, CameraError> {
        let pc = self.pose.world_to_camera(&Vector3::from(*point));
        match self.model {
            CameraModel::Pinhole { fx, fy, cx, cy, .. } => {
                if pc.z <= 0.0 {
                    return Err(CameraError::BehindCamera);
                }
                Ok(Projection {
                    u: cx + fx * pc.x / pc.z,
                    v: cy + fy * pc.y / pc.z,
                    depth: pc.norm(),
                })
            }
            CameraModel::Equirectangular { width, height } => {
                let r = pc.norm();
                if r == 0.0 {
                    return Err(CameraError::AtCameraCenter);
                }
                let w = width as f64;
                let azimuth = pc.x.atan2(pc.z);
                let u = (azimuth / TAU + 0.5) * w - self.column_shift as f64;
                let elevation = (pc.y / r).clamp(-1.0, 1.0).asin();
                Ok(Projection {
                    u: u.rem_euclid(w),
                    v: (elevation / PI + 0.5) * height as f64,
                    depth: r,
                })
            }
        }
    }

    /// Frustum test: projectable, inside the raster after flooring, and within
    /// `r_max` (inclusive). The equirectangular frustum is the full sphere.
    pub fn in_frustum(&self, point: &[f64; 3], r_max: f64) -> bool {
        self.frustum_projection(point, r_max).is_some()
    }

    /// Projection and raster cell when [`Self::in_frustum`] holds.
    pub fn frustum_projection(
        &self,
        point: &[f64; 3],
        r_max: f64,
    ) -> Option<(Projection, (u32, u32))> {
        let proj = self.project(point).ok()?;
        if !(proj.depth <= r_max) {
            return None;
        }
        let (w, h) = self.size();
        let px = proj.pixel(w, h)?;
        Some((proj, px))
    }

    /// World-space unit ray through the center of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = match self.model {
            CameraModel::Pinhole { fx, fy, cx, cy, .. } => {
                Vector3::new((u - cx) / fx, (v - cy) / fy, 1.0).normalize()
            }
            CameraModel::Equirectangular { width, height } => {
                let w = width as f64;
                let azimuth = ((u + self.column_shift as f64) / w - 0.5) * TAU;
                let elevation = (v / height as f64 - 0.5) * PI;
                Vector3::new(
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                    elevation.cos() * azimuth.cos(),
                )
            }
        };
        self.pose.camera_to_world_dir(&d)
    }

    /// Returns a copy whose panorama is rolled so that the circular mean azimuth
    /// of `points` lands on the center column. The roll is quantized to whole
    /// columns so that rasters can be rolled consistently with
    /// [`roll_columns`].
    pub fn recenter_equirect(&self, points: &[[f64; 3]]) -> Result<CameraView, CameraError> {
        let CameraModel::Equirectangular { width, .. } = self.model else {
            return Err(CameraError::NotEquirectangular);
        };
        let (mut s, mut c) = (0.0, 0.0);
        let mut n = 0usize;
        for p in points {
            let pc = self.pose.world_to_camera(&Vector3::from(*p));
            if pc.norm() == 0.0 {
                continue;
            }
            let az = pc.x.atan2(pc.z);
            s += az.sin();
            c += az.cos();
            n += 1;
        }
        if n == 0 {
            return Err(CameraError::NoVisiblePoints);
        }
        let mean = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) };
        let w = width as i64;
        let shift = ((mean / TAU * w as f64).round() as i64).rem_euclid(w);
        Ok(CameraView {
            column_shift: shift,
            ..self.clone()
        })
    }
}

/// Rolls raster columns so that `out[u] = in[(u + shift) mod W]`, matching a
/// view recentered with the same `shift`.
pub fn roll_columns(raster: &ImageRaster, shift: i64) -> ImageRaster {
    let (w, h, ch) = (
        raster.width() as usize,
        raster.height() as usize,
        raster.channels() as usize,
    );
    let src = raster.data();
    let mut out = vec![0.0f32; src.len()];
    for row in 0..h {
        for u in 0..w {
            let from = (u as i64 + shift).rem_euclid(w as i64) as usize;
            let d = (row * w + u) * ch;
            let s = (row * w + from) * ch;
            out[d..d + ch].copy_from_slice(&src[s..s + ch]);
        }
    }
    ImageRaster::new(raster.width(), raster.height(), raster.channels(), out)
        .expect("same shape")
}

/// Rectangular window of an image, possibly extending past its borders
/// (padded) or across the panorama seam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub u0: i64,
    pub v0: i64,
    pub width: u32,
    pub height: u32,
    /// Equirectangular azimuth offset (radians) the window refers to.
    pub rotation_offset: f64,
}

impl Viewport {
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn contains(&self, u: i64, v: i64) -> bool {
        u >= self.u0
            && v >= self.v0
            && u < self.u0 + self.width as i64
            && v < self.v0 + self.height as i64
    }

    /// Smallest distance from pixel `(u, v)` to the window border, negative if outside.
    pub fn margin_of(&self, u: i64, v: i64) -> i64 {
        let left = u - self.u0;
        let top = v - self.v0;
        let right = self.u0 + self.width as i64 - 1 - u;
        let bottom = self.v0 + self.height as i64 - 1 - v;
        left.min(top).min(right).min(bottom)
    }

    /// Cuts the window out of `raster`, padding with zeros outside (columns wrap
    /// when `wrap_columns` is set).
    pub fn crop(&self, raster: &ImageRaster, wrap_columns: bool) -> ImageRaster {
        let (w, h, ch) = (
            raster.width() as i64,
            raster.height() as i64,
            raster.channels() as usize,
        );
        let mut out = vec![0.0f32; self.area() as usize * ch];
        for r in 0..self.height as i64 {
            let v = self.v0 + r;
            if v < 0 || v >= h {
                continue;
            }
            for c in 0..self.width as i64 {
                let mut u = self.u0 + c;
                if wrap_columns {
                    u = u.rem_euclid(w);
                } else if u < 0 || u >= w {
                    continue;
                }
                let s = ((v * w + u) as usize) * ch;
                let d = ((r * self.width as i64 + c) as usize) * ch;
                out[d..d + ch].copy_from_slice(&raster.data()[s..s + ch]);
            }
        }
        ImageRaster::new(self.width, self.height, raster.channels(), out).expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pinhole(f: f64, c: f64, size: u32) -> CameraView {
        CameraView::new(
            0,
            CameraModel::Pinhole {
                fx: f,
                fy: f,
                cx: c,
                cy: c,
                width: size,
                height: size,
            },
            Pose::identity(),
        )
        .unwrap()
    }

    fn equirect(w: u32, h: u32) -> CameraView {
        CameraView::new(
            0,
            CameraModel::Equirectangular {
                width: w,
                height: h,
            },
            Pose::identity(),
        )
        .unwrap()
    }

    #[test]
    fn pinhole_projection_examples() {
        let cam = pinhole(100.0, 100.0, 200);
        let p = cam.project(&[0.0, 0.0, 5.0]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (100.0, 100.0, 5.0));
        let p = cam.project(&[1.0, 0.0, 5.0]).unwrap();
        assert_relative_eq!(p.u, 120.0, epsilon = 1e-12);
        assert_relative_eq!(p.v, 100.0, epsilon = 1e-12);
        assert_relative_eq!(p.depth, 26f64.sqrt(), epsilon = 1e-12);
        assert_eq!(cam.project(&[0.0, 0.0, -1.0]), Err(CameraError::BehindCamera));
        assert_eq!(cam.project(&[1.0, 0.0, 0.0]), Err(CameraError::BehindCamera));
    }

    #[test]
    fn equirect_forward_is_center() {
        let cam = equirect(1024, 512);
        let p = cam.project(&[0.0, 0.0, 3.0]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (512.0, 256.0, 3.0));
        // +Y is down: a point below the horizon lands in the lower half.
        let below = cam.project(&[0.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(below.v, 384.0, epsilon = 1e-9);
        let right = cam.project(&[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(right.u, 768.0, epsilon = 1e-9);
    }

    #[test]
    fn frustum_examples() {
        let eq = equirect(1024, 512);
        assert!(eq.in_frustum(&[0.0, 0.0, 8.0], 8.0));
        assert!(!eq.in_frustum(&[0.0, 0.0, 8.0 + 1e-9], 8.0));
        let cam = pinhole(100.0, 64.0, 128);
        assert!(!cam.in_frustum(&[0.0, 0.0, -2.0], 8.0));
        // u = 64 + 100 * 0.66 / 1 = 130
        assert!(!cam.in_frustum(&[0.66, 0.0, 1.0], 8.0));
        assert!(cam.in_frustum(&[0.0, 0.0, 1.0], 8.0));
    }

    #[test]
    fn recenter_fixed_point_and_seam() {
        let cam = equirect(1024, 512);
        let centered = cam.recenter_equirect(&[[0.0, 0.0, 2.0], [0.0, 0.5, 1.0]]).unwrap();
        assert_eq!(centered.column_shift(), 0);
        assert_eq!(centered.rotation_offset(), 0.0);

        let behind = [[0.0, 0.0, -2.0], [0.01, 0.0, -3.0], [-0.01, 0.2, -1.0]];
        let before = cam.project(&behind[0]).unwrap();
        assert!(before.u < 1.0 || before.u > 1023.0);
        let re = cam.recenter_equirect(&behind).unwrap();
        assert_relative_eq!(re.rotation_offset(), PI, epsilon = 1e-12);
        for p in &behind {
            let u = re.project(p).unwrap().u;
            assert!((u - 512.0).abs() < 4.0, "u = {u}");
        }
        assert_eq!(
            cam.recenter_equirect(&[]),
            Err(CameraError::NoVisiblePoints)
        );
        assert_eq!(
            pinhole(10.0, 5.0, 10).recenter_equirect(&behind),
            Err(CameraError::NotEquirectangular)
        );
    }

    #[test]
    fn recenter_shift_is_consistent_with_roll() {
        let cam = equirect(64, 32);
        let pts = [[1.0, 0.1, 0.2], [0.9, -0.3, 0.5]];
        let re = cam.recenter_equirect(&pts).unwrap();
        let shift = re.column_shift();
        let img = ImageRaster::new(
            64,
            32,
            1,
            (0..64 * 32).map(|i| (i % 64) as f32).collect(),
        )
        .unwrap();
        let rolled = roll_columns(&img, shift);
        for p in &pts {
            let old = cam.project(p).unwrap();
            let new = re.project(p).unwrap();
            let expected = (old.u - shift as f64).rem_euclid(64.0);
            assert_relative_eq!(new.u, expected, epsilon = 1e-9);
            assert_eq!(new.v, old.v);
            let (nu, nv) = new.pixel(64, 32).unwrap();
            let (ou, ov) = old.pixel(64, 32).unwrap();
            assert_eq!(rolled.get(nu, nv, 0), img.get(ou, ov, 0));
        }
    }

    #[test]
    fn look_at_points_forward() {
        let pose = Pose::look_at(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(1.0, 2.0, 10.0),
            Vector3::new(0.0, 1.0, 0.0),
        );
        assert!(rotation_deviation(&pose.rotation) < 1e-12);
        let pc = pose.world_to_camera(&Vector3::new(1.0, 2.0, 5.0));
        assert_relative_eq!(pc, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
        // world up appears towards -Y (top of the image)
        let up = pose.world_to_camera(&Vector3::new(1.0, 3.0, 3.0));
        assert!(up.y < 0.0);
    }

    #[test]
    fn pixel_ray_inverts_projection() {
        let cam = CameraView::new(
            3,
            CameraModel::Pinhole {
                fx: 80.0,
                fy: 90.0,
                cx: 40.0,
                cy: 30.0,
                width: 80,
                height: 60,
            },
            Pose::look_at(
                Vector3::new(0.5, 0.0, -1.0),
                Vector3::new(0.0, 0.3, 2.0),
                Vector3::new(0.0, 1.0, 0.0),
            ),
        )
        .unwrap();
        let p = [0.3, 0.2, 1.5];
        let proj = cam.project(&p).unwrap();
        let ray = cam.pixel_ray(proj.u, proj.v);
        let back = cam.center() + ray * proj.depth;
        assert_relative_eq!(back, Vector3::from(p), epsilon = 1e-9);

        let eq = equirect(128, 64).recenter_equirect(&[[1.0, 0.0, 0.0]]).unwrap();
        let p = [-0.4, 0.7, 1.2];
        let proj = eq.project(&p).unwrap();
        let back = eq.center() + eq.pixel_ray(proj.u, proj.v) * proj.depth;
        assert_relative_eq!(back, Vector3::from(p), epsilon = 1e-9);
    }
}
