//! Ray-traced synthetic RGB + thermal scenes.
//!
//! Bright RGB is Lambertian shading with hard shadows from one directional
//! light plus ambient, 2×2 supersampled. Thermal is the temperature of the
//! nearest hit at the pixel center (background 0) and is produced before,
//! and independently of, darkening.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, ImageGray, ImageRgb, MultiViewFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Square of side `2·half_size` centered at `center`.
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        half_size: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Emission temperature in `[0, 1]`.
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Darkening {
    pub gain: f64,
    pub gamma_dark: f64,
    pub sigma: f64,
    /// Per-view gain is `gain·exp(u)` with `u` uniform in `[-j, j]`; models
    /// exposure differences between low-light captures.
    #[serde(default)]
    pub gain_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub target: [f64; 3],
    /// Direction towards the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub darkening: Darkening,
    pub num_points: usize,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl SyntheticSceneSpec {
    /// Desk-scale scene: a floor with books, a bag, a bottle and a ball.
    pub fn desk() -> Self {
        let obj = |shape, albedo, temperature| SceneObject {
            shape,
            albedo,
            temperature,
        };
        Self {
            seed: 7,
            objects: vec![
                obj(
                    Shape::Plane {
                        center: [0.0, 0.0, 0.0],
                        normal: [0.0, 1.0, 0.0],
                        half_size: 1.6,
                    },
                    [0.55, 0.5, 0.45],
                    0.35,
                ),
                obj(
                    Shape::Box {
                        min: [-0.9, 0.0, -0.5],
                        max: [-0.3, 0.25, 0.1],
                    },
                    [0.8, 0.2, 0.15],
                    0.5,
                ),
                obj(
                    Shape::Box {
                        min: [0.2, 0.0, -0.8],
                        max: [0.7, 0.9, -0.35],
                    },
                    [0.2, 0.35, 0.75],
                    0.8,
                ),
                obj(
                    Shape::Box {
                        min: [0.35, 0.0, 0.35],
                        max: [0.55, 0.6, 0.55],
                    },
                    [0.25, 0.75, 0.3],
                    0.15,
                ),
                obj(
                    Shape::Sphere {
                        center: [-0.4, 0.35, 0.6],
                        radius: 0.35,
                    },
                    [0.9, 0.85, 0.3],
                    1.0,
                ),
            ],
            num_views: 16,
            width: 160,
            height: 120,
            fov_y_deg: 50.0,
            orbit_radius: 3.2,
            orbit_height: 1.8,
            target: [0.0, 0.3, 0.0],
            light_dir: [0.4, 1.0, 0.3],
            ambient: 0.25,
            darkening: Darkening {
                gain: 0.15,
                gamma_dark: 1.2,
                sigma: 0.01,
                gain_jitter: 0.4,
            },
            num_points: 1000,
        }
    }

    /// The desk layout with object positions, colors and temperatures
    /// perturbed by `seed`, for multi-scene experiments.
    pub fn desk_variant(seed: u64) -> Self {
        let mut spec = Self::desk();
        spec.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_de5c);
        for obj in spec.objects.iter_mut().skip(1) {
            let dx = rng.random_range(-0.25..0.25);
            let dz = rng.random_range(-0.25..0.25);
            match &mut obj.shape {
                Shape::Sphere { center, .. } => {
                    center[0] += dx;
                    center[2] += dz;
                }
                Shape::Box { min, max } => {
                    min[0] += dx;
                    max[0] += dx;
                    min[2] += dz;
                    max[2] += dz;
                }
                Shape::Plane { center, .. } => {
                    center[0] += dx;
                    center[2] += dz;
                }
            }
            for c in &mut obj.albedo {
                *c = (*c + rng.random_range(-0.15..0.15)).clamp(0.05, 0.95);
            }
            obj.temperature = (obj.temperature + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::EmptyScene);
        }
        if self.num_views < 2 {
            return Err(Error::InvalidConfig("a scene needs at least 2 views".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image dimensions must be positive".into()));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::InvalidConfig("field of view must be in (0, 180) degrees".into()));
        }
        check_darkening(self.darkening.gain, self.darkening.gamma_dark, self.darkening.sigma)?;
        if !(self.darkening.gain_jitter >= 0.0) {
            return Err(Error::InvalidConfig("gain jitter must be non-negative".into()));
        }
        for o in &self.objects {
            if !(0.0..=1.0).contains(&o.temperature) || o.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidConfig("albedo and temperature must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Orbit cameras, evenly spaced in azimuth.
    pub fn cameras(&self) -> Vec<Camera> {
        let target = v3(self.target);
        (0..self.num_views)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / self.num_views as f64;
                let eye = Vector3::new(
                    self.orbit_radius * a.cos(),
                    self.orbit_height,
                    self.orbit_radius * a.sin(),
                );
                Camera::look_at(
                    eye,
                    target,
                    Vector3::y(),
                    self.fov_y_deg.to_radians(),
                    self.width,
                    self.height,
                )
            })
            .collect()
    }
}

fn check_darkening(g: f64, gamma_dark: f64, sigma: f64) -> Result<()> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::InvalidConfig(format!("darkening gain {g} outside (0, 1]")));
    }
    if !(gamma_dark >= 1.0 && gamma_dark.is_finite()) {
        return Err(Error::InvalidConfig(format!("gamma_dark {gamma_dark} must be ≥ 1")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma {sigma} must be ≥ 0")));
    }
    Ok(())
}

/// Surface samples with colors, used to initialize Gaussians.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub frames: Vec<MultiViewFrame>,
    pub points: PointCloud,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    object: usize,
}

fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = o - v3(*center);
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > EPS { -b - s } else { -b + s };
            (t > EPS).then(|| (t, (o + d * t - v3(*center)) / *radius))
        }
        Shape::Box { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis0 = 0;
            let mut axis1 = 0;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let mut lo = (min[a] - o[a]) / d[a];
                let mut hi = (max[a] - o[a]) / d[a];
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                if lo > t0 {
                    t0 = lo;
                    axis0 = a;
                }
                if hi < t1 {
                    t1 = hi;
                    axis1 = a;
                }
            }
            if t0 > t1 {
                return None;
            }
            let (t, axis) = if t0 > EPS { (t0, axis0) } else { (t1, axis1) };
            if t <= EPS {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = -d[axis].signum();
            Some((t, n))
        }
        Shape::Plane {
            center,
            normal,
            half_size,
        } => {
            let n = v3(*normal).normalize();
            let denom = d.dot(&n);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (v3(*center) - o).dot(&n) / denom;
            if t <= EPS {
                return None;
            }
            let (u, v) = plane_basis(&n);
            let rel = o + d * t - v3(*center);
            (rel.dot(&u).abs() <= *half_size && rel.dot(&v).abs() <= *half_size).then_some((t, n))
        }
    }
}

fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&a).normalize();
    (u, n.cross(&u))
}

fn trace(objects: &[SceneObject], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, obj) in objects.iter().enumerate() {
        if let Some((t, normal)) = intersect(&obj.shape, o, d) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, object: i });
            }
        }
    }
    best
}

fn shade(spec: &SyntheticSceneSpec, light: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
    let Some(hit) = trace(&spec.objects, o, d) else {
        return [0.0; 3];
    };
    let mut n = hit.normal;
    if n.dot(d) > 0.0 {
        n = -n;
    }
    let p = o + d * hit.t + n * 1e-6;
    let lambert = n.dot(light).max(0.0);
    let lit = if lambert > 0.0 && trace(&spec.objects, &p, light).is_none() {
        lambert
    } else {
        0.0
    };
    let k = spec.ambient + (1.0 - spec.ambient) * lit;
    let a = spec.objects[hit.object].albedo;
    [a[0] * k, a[1] * k, a[2] * k]
}

fn render_view(spec: &SyntheticSceneSpec, cam: &Camera) -> (ImageRgb, ImageGray) {
    let light = v3(spec.light_dir).normalize();
    let o = cam.center();
    let rgb = ImageRgb::from_fn(cam.width, cam.height, |x, y| {
        let mut acc = [0.0; 3];
        for (sx, sy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
            let c = shade(spec, &light, &o, &cam.ray_direction(x as f64 + sx, y as f64 + sy));
            for k in 0..3 {
                acc[k] += 0.25 * c[k];
            }
        }
        acc
    });
    let thermal = ImageGray::from_fn(cam.width, cam.height, |x, y| {
        trace(&spec.objects, &o, &cam.ray_direction(x as f64, y as f64)).map_or(0.0, |h| spec.objects[h.object].temperature)
    });
    (rgb, thermal)
}

/// `clamp((g·I)^γ + N(0, σ), 0, 1)`, deterministic in `seed`.
pub fn darken(img: &ImageRgb, g: f64, gamma_dark: f64, sigma: f64, seed: u64) -> Result<ImageRgb> {
    check_darkening(g, gamma_dark, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(ImageRgb {
        data: img
            .data
            .iter()
            .map(|v| {
                let base = (g * v).powf(gamma_dark);
                let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (base + n).clamp(0.0, 1.0)
            })
            .collect(),
        ..img.clone()
    })
}

fn sample_surface(shape: &Shape, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    match shape {
        Shape::Sphere { center, radius } => {
            let v = Vector3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            v3(*center) + v.normalize() * *radius
        }
        Shape::Box { min, max } => {
            let e = v3(*max) - v3(*min);
            let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (a, area) in areas.iter().enumerate() {
                if pick < *area {
                    axis = a;
                    break;
                }
                pick -= area;
            }
            let mut p = Vector3::new(
                rng.random_range(min[0]..=max[0]),
                rng.random_range(min[1]..=max[1]),
                rng.random_range(min[2]..=max[2]),
            );
            p[axis] = if rng.random::<bool>() { max[axis] } else { min[axis] };
            p
        }
        Shape::Plane {
            center,
            normal,
            half_size,
        } => {
            let (u, v) = plane_basis(&v3(*normal).normalize());
            v3(*center) + u * rng.random_range(-half_size..=*half_size) + v * rng.random_range(-half_size..=*half_size)
        }
    }
}

fn surface_area(shape: &Shape) -> f64 {
    match shape {
        Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        Shape::Box { min, max } => {
            let e = v3(*max) - v3(*min);
            2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
        }
        Shape::Plane { half_size, .. } => 4.0 * half_size * half_size,
    }
}

/// Area-weighted surface samples.
pub fn sample_points(objects: &[SceneObject], n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = objects.iter().map(|o| surface_area(&o.shape)).collect();
    let total: f64 = areas.iter().sum();
    let mut cloud = PointCloud::default();
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut idx = objects.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
        }
        let p = sample_surface(&objects[idx].shape, &mut rng);
        cloud.positions.push([p.x, p.y, p.z]);
        cloud.colors.push(objects[idx].albedo);
    }
    cloud
}

/// Per-view seed for darkening noise and exposure jitter.
fn view_seed(seed: u64, view: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(view as u64 + 1)
}

pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let cams = spec.cameras();
    let dk = &spec.darkening;
    let frames = cams
        .into_par_iter()
        .enumerate()
        .map(|(v, camera)| {
            let (bright, thermal) = render_view(spec, &camera);
            let seed = view_seed(spec.seed, v);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gain = (dk.gain * (dk.gain_jitter * rng.random_range(-1.0..=1.0f64)).exp()).min(1.0);
            let rgb_low = darken(&bright, gain, dk.gamma_dark, dk.sigma, seed ^ 0xA5A5)?;
            Ok(MultiViewFrame {
                rgb_low,
                thermal,
                camera,
                rgb_gt_bright: Some(bright),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Points stand in for structure-from-motion output on the captured
    // images, so they carry the noise-free darkened albedo.
    let mut points = sample_points(&spec.objects, spec.num_points, spec.seed);
    for c in &mut points.colors {
        for v in c.iter_mut() {
            *v = (dk.gain * *v).powf(dk.gamma_dark);
        }
    }
    Ok(SyntheticScene { frames, points })
}
