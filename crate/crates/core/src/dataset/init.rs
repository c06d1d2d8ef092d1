//! Gaussian initialization from a point cloud.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{Camera, Gaussian3D};

use super::synth::PointCloud;

pub const DEFAULT_KNN: usize = 3;
pub const INITIAL_OPACITY: f64 = 0.1;

/// Mean distance from each point to its `k` nearest neighbors. Brute force,
/// which is fine for a few thousand points.
pub fn knn_mean_distances(points: &[[f64; 3]], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k_neighbors must be at least 1".into()));
    }
    if points.len() < k + 1 {
        return Err(Error::TooFewPoints {
            needed: k + 1,
            got: points.len(),
        });
    }
    let pts: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
    let mut out = Vec::with_capacity(pts.len());
    let mut d = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        d.clear();
        d.extend(pts.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| (p - q).norm()));
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        out.push(d[..k].iter().sum::<f64>() / k as f64);
    }
    Ok(out)
}

/// One isotropic Gaussian per point with scale equal to the mean distance to
/// its `k` nearest neighbors, opacity 0.1 and the point's color.
pub fn init_gaussians(cloud: &PointCloud, k: usize) -> Result<Vec<Gaussian3D>> {
    if cloud.colors.len() != cloud.positions.len() {
        return Err(Error::InvalidConfig("point cloud has mismatched color count".into()));
    }
    if cloud.positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "point cloud" });
    }
    let scales = knn_mean_distances(&cloud.positions, k)?;
    Ok(cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .zip(scales)
        .map(|((p, c), s)| Gaussian3D::new(Vector3::from(*p), s.max(1e-6), INITIAL_OPACITY, *c))
        .collect())
}

/// Fallback when a scene has no point cloud: `n` Gaussians uniform in a
/// cube around the point closest to all camera optical axes, gray, with
/// the usual kNN scales.
pub fn random_init(cameras: &[Camera], n: usize, k: usize, seed: u64) -> Result<Vec<Gaussian3D>> {
    if cameras.is_empty() {
        return Err(Error::InvalidConfig("random init needs at least one camera".into()));
    }
    // Least-squares intersection of the optical axes.
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for cam in cameras {
        let c = cam.center();
        let d = cam.rotation.row(2).transpose();
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * c;
    }
    let mean_center = cameras.iter().map(|c| c.center()).sum::<Vector3<f64>>() / cameras.len() as f64;
    let focus = a.try_inverse().map_or(mean_center, |inv| inv * b);
    let dist = cameras.iter().map(|c| (c.center() - focus).norm()).sum::<f64>() / cameras.len() as f64;
    let half = 0.35 * dist;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for (i, v) in p.iter_mut().enumerate() {
                *v = focus[i] + rng.random_range(-half..=half);
            }
            p
        })
        .collect();
    init_gaussians(
        &PointCloud {
            colors: vec![[0.5; 3]; positions.len()],
            positions,
        },
        k,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render;
    use crate::scene::Camera;

    fn cloud(positions: Vec<[f64; 3]>) -> PointCloud {
        let colors = vec![[0.6, 0.5, 0.4]; positions.len()];
        PointCloud { positions, colors }
    }

    #[test]
    fn two_points() {
        let d = 0.37;
        let gs = init_gaussians(&cloud(vec![[0.0; 3], [d, 0.0, 0.0]]), 1).unwrap();
        for g in &gs {
            for s in g.log_scale.iter() {
                assert!((s.exp() - d).abs() < 1e-15);
            }
            assert!((g.opacity() - 0.1).abs() < 1e-15);
            assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn grid_pitch_oracle() {
        // Interior points of a cubic lattice have 6 neighbors at the pitch.
        let pitch = 0.25;
        let n = 5;
        let mut pos = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    pos.push([i as f64 * pitch, j as f64 * pitch, k as f64 * pitch]);
                }
            }
        }
        let gs = init_gaussians(&cloud(pos.clone()), 3).unwrap();
        for (p, g) in pos.iter().zip(&gs) {
            assert!((g.log_scale.x.exp() - pitch).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            init_gaussians(&cloud(vec![[0.0; 3]; 3]), 3),
            Err(Error::TooFewPoints { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn initial_render_not_black() {
        let mut pos = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pos.push([i as f64 * 0.1 - 0.45, j as f64 * 0.1 - 0.45, 0.0]);
            }
        }
        let gs = init_gaussians(&cloud(pos), 3).unwrap();
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            0.8,
            32,
            24,
        );
        let out = render(&gs, &cam, [0.0; 3]).unwrap();
        assert!(out.color.mean_luma() > 0.01);
    }

    #[test]
    fn random_init_surrounds_orbit_focus() {
        let cams: Vec<Camera> = (0..6)
            .map(|i| {
                let a = i as f64;
                Camera::look_at(
                    Vector3::new(3.0 * a.cos(), 1.0, 3.0 * a.sin()),
                    Vector3::new(0.0, 0.5, 0.0),
                    Vector3::y(),
                    0.8,
                    16,
                    12,
                )
            })
            .collect();
        let gs = random_init(&cams, 200, 3, 1).unwrap();
        assert_eq!(gs.len(), 200);
        let mean: Vector3<f64> = gs.iter().map(|g| g.position).sum::<Vector3<f64>>() / 200.0;
        assert!((mean - Vector3::new(0.0, 0.5, 0.0)).norm() < 0.2, "{mean}");
        assert_eq!(gs, random_init(&cams, 200, 3, 1).unwrap());
    }
}
