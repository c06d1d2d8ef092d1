//! Shared domain types: Gaussian primitives, pinhole cameras, images and
//! multi-view frames.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// One anisotropic 3D Gaussian. All fields are unconstrained optimizer
/// parameters; [`Gaussian3D::activate`] maps them to opacity and color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    /// Per-axis standard deviation, log space.
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`. Normalized before use.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// Color before the sigmoid.
    pub color_raw: Vector3<f64>,
}

impl Gaussian3D {
    /// Number of scalar parameters per Gaussian.
    pub const NUM_PARAMS: usize = 14;

    pub fn new(position: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        let c = |v: f64| logit(v.clamp(1e-4, 1.0 - 1e-4));
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color_raw: Vector3::new(c(color[0]), c(color[1]), c(color[2])),
        }
    }

    pub fn activate(&self) -> (f64, Vector3<f64>) {
        (sigmoid(self.opacity_logit), self.color_raw.map(sigmoid))
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_of(self)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Flat parameter order: position, log_scale, rotation, opacity_logit, color_raw.
    pub fn to_array(&self) -> [f64; Self::NUM_PARAMS] {
        let p = &self.position;
        let s = &self.log_scale;
        let q = &self.rotation;
        let c = &self.color_raw;
        [
            p.x,
            p.y,
            p.z,
            s.x,
            s.y,
            s.z,
            q[0],
            q[1],
            q[2],
            q[3],
            self.opacity_logit,
            c.x,
            c.y,
            c.z,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= Self::NUM_PARAMS);
        Self {
            position: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            rotation: [v[6], v[7], v[8], v[9]],
            opacity_logit: v[10],
            color_raw: Vector3::new(v[11], v[12], v[13]),
        }
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Pulls a gradient w.r.t. the rotation matrix back to the raw (unnormalized)
/// quaternion.
pub fn quat_to_matrix_backward(q: [f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = d_rot;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    // Project out the radial component: R depends only on q / |q|.
    let dn = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let dot: f64 = dn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [
        (dn[0] - qn[0] * dot) / n,
        (dn[1] - qn[1] * dot) / n,
        (dn[2] - qn[2] * dot) / n,
        (dn[3] - qn[3] * dot) / n,
    ]
}

/// World-space covariance `R S² Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance_of(g: &Gaussian3D) -> Result<Matrix3<f64>> {
    let r = quat_to_matrix(g.rotation)?;
    let s2 = Matrix3::from_diagonal(&g.log_scale.map(|s| (2.0 * s).exp()));
    Ok(r * s2 * r.transpose())
}

/// Opacity and color after the sigmoid.
pub fn activate(g: &Gaussian3D) -> (f64, Vector3<f64>) {
    g.activate()
}

/// Pinhole camera; pixel `(i, j)` has its center at `(i, j)` in image
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Camera at `eye` looking at `target`, image y axis pointing along `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let fy = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self {
            fx: fy,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig("camera focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera dimensions must be positive".into()));
        }
        let rrt = self.rotation * self.rotation.transpose();
        if (rrt - Matrix3::identity()).amax() > 1e-6 {
            return Err(Error::InvalidConfig("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space unit ray direction through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    /// Same camera at a different resolution; intrinsics are rescaled.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }

    /// Row-major 4×4 world-to-camera matrix.
    pub fn world_to_camera_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn set_world_to_camera_matrix(&mut self, m: &[f64; 16]) {
        self.rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        self.translation = Vector3::new(m[3], m[7], m[11]);
    }
}

/// Row-major RGB image with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(3)
    }

    pub fn luma(&self) -> ImageGray {
        ImageGray {
            width: self.width,
            height: self.height,
            data: self
                .pixels()
                .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                .collect(),
        }
    }

    pub fn mean_luma(&self) -> f64 {
        let l = self.luma();
        l.data.iter().sum::<f64>() / l.data.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_dims(&self, other: (usize, usize), context: &'static str) -> Result<()> {
        if self.dims() != other {
            return Err(Error::DimensionMismatch {
                context,
                expected: other,
                found: self.dims(),
            });
        }
        Ok(())
    }
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_dims(&self, other: (usize, usize), context: &'static str) -> Result<()> {
        if self.dims() != other {
            return Err(Error::DimensionMismatch {
                context,
                expected: other,
                found: self.dims(),
            });
        }
        Ok(())
    }
}

/// One captured viewpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewFrame {
    pub rgb_low: ImageRgb,
    pub thermal: ImageGray,
    pub camera: Camera,
    /// Well-exposed reference, evaluation only.
    pub rgb_gt_bright: Option<ImageRgb>,
}

impl MultiViewFrame {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let dims = (self.camera.width, self.camera.height);
        self.rgb_low.check_same_dims(dims, "frame rgb_low")?;
        self.thermal.check_same_dims(dims, "frame thermal")?;
        if let Some(gt) = &self.rgb_gt_bright {
            gt.check_same_dims(dims, "frame rgb_gt_bright")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_mat_eq {
        ($a:expr, $b:expr, $tol:expr) => {{
            let d = ($a - $b).amax();
            assert!(d <= $tol, "matrices differ by {d}:\n{}\n{}", $a, $b);
        }};
    }

    fn gaussian(rot: [f64; 4], log_scale: [f64; 3]) -> Gaussian3D {
        Gaussian3D {
            position: Vector3::zeros(),
            log_scale: Vector3::from(log_scale),
            rotation: rot,
            opacity_logit: 0.0,
            color_raw: Vector3::zeros(),
        }
    }

    #[test]
    fn covariance_identity() {
        let c = covariance_of(&gaussian([1.0, 0.0, 0.0, 0.0], [0.0; 3])).unwrap();
        assert_mat_eq!(c, Matrix3::<f64>::identity(), 1e-15);
    }

    #[test]
    fn covariance_axis_scale() {
        let c = covariance_of(&gaussian([1.0, 0.0, 0.0, 0.0], [2f64.ln(), 0.0, 0.0])).unwrap();
        assert_mat_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), 1e-12);
    }

    #[test]
    fn covariance_rotated_about_z() {
        // Oracle: explicit rotation matrix for 90° about z times diag(4,1,1).
        let h = std::f64::consts::FRAC_PI_4;
        let g = gaussian([h.cos(), 0.0, 0.0, h.sin()], [2f64.ln(), 0.0, 0.0]);
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = rz * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * rz.transpose();
        let c = covariance_of(&g).unwrap();
        assert_mat_eq!(c, expected, 1e-12);
        assert_mat_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), 1e-12);
    }

    #[test]
    fn zero_quaternion_is_degenerate() {
        let err = covariance_of(&gaussian([0.0; 4], [0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRotation));
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1e3), 1.0);
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
        let mut g = gaussian([1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        g.opacity_logit = 2.0;
        let (o, c) = activate(&g);
        assert!((o - 0.8808).abs() < 1e-4);
        assert_eq!(c, Vector3::repeat(0.5));
    }

    #[test]
    fn quaternion_backward_matches_finite_difference() {
        let q = [0.7, -0.3, 0.5, 0.2];
        let upstream = Matrix3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, 0.2, 0.8, -0.7);
        let f = |q: [f64; 4]| quat_to_matrix(q).unwrap().component_mul(&upstream).sum();
        let analytic = quat_to_matrix_backward(q, &upstream);
        for k in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(qp) - f(qm)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "component {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            Vector3::new(3.0, -1.0, 2.0),
            Vector3::new(0.0, 0.5, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            0.8,
            32,
            24,
        );
        cam.validate().unwrap();
        let pc = cam.world_to_camera(&Vector3::new(0.0, 0.5, 0.0));
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12 && pc.z > 0.0);
        assert!((cam.center() - Vector3::new(3.0, -1.0, 2.0)).norm() < 1e-12);
        let m = cam.world_to_camera_matrix();
        let mut other = cam.clone();
        other.set_world_to_camera_matrix(&m);
        assert_eq!(other, cam);
    }

    proptest::proptest! {
        #[test]
        fn covariance_sign_flip_invariant(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
                                          s0 in -2.0f64..1.0, s1 in -2.0f64..1.0, s2 in -2.0f64..1.0) {
            proptest::prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let a = covariance_of(&gaussian([w, x, y, z], [s0, s1, s2])).unwrap();
            let b = covariance_of(&gaussian([-w, -x, -y, -z], [s0, s1, s2])).unwrap();
            proptest::prop_assert!((a - b).amax() <= 1e-12 * a.amax().max(1.0));
            proptest::prop_assert!((a - a.transpose()).amax() <= 1e-12 * a.amax().max(1.0));
            let eig = a.symmetric_eigenvalues();
            let floor = (2.0 * s0.min(s1).min(s2)).exp();
            for e in eig.iter() {
                proptest::prop_assert!(*e >= floor * (1.0 - 1e-9));
            }
        }

        #[test]
        fn sigmoid_strictly_monotone(a in -30.0f64..30.0, d in 1e-3f64..5.0) {
            proptest::prop_assert!(sigmoid(a + d) > sigmoid(a));
            proptest::prop_assert!((2.0 * (a + d)).exp() > (2.0 * a).exp());
        }
    }
}
