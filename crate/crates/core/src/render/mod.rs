//! Tile-parallel differentiable splatting.
//!
//! Splats are globally sorted by camera depth once per frame, then binned
//! into 16×16 pixel tiles by their 3σ bounding box. Tiles only partition the
//! work; every pixel still sees its contributors in exact global depth order.
//! A splat touches a pixel when the pixel lies inside its 3σ ellipse
//! (`power ≥ -4.5`).

mod gradcheck;

pub use gradcheck::{gradcheck, gradcheck_with, relative_error, ClassError, GradcheckReport, LossSpec, REL_ERROR_FLOOR};

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{quat_to_matrix, quat_to_matrix_backward, Camera, Gaussian3D, ImageGray, ImageRgb};

pub const TILE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_REGULARIZATION: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// `-½·3²`: pixels outside the 3σ ellipse are skipped.
pub const POWER_CUTOFF: f64 = -4.5;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub source_index: usize,
    /// Half extents of the 3σ bounding box, pixels.
    pub radius: Vector2<f64>,
}

/// Per-splat values the backward pass needs beyond the splat itself.
#[derive(Clone, Debug)]
struct ProjCache {
    cam_pos: Vector3<f64>,
    /// `J·W`.
    jw: Matrix2x3<f64>,
    cov3d: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    quat: [f64; 4],
}

fn project_cached(g: &Gaussian3D, index: usize, cam: &Camera) -> Option<(Splat2D, ProjCache)> {
    let pc = cam.world_to_camera(&g.position);
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let rot = quat_to_matrix(g.rotation).ok()?;
    let scale = g.log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let cov3d = m * m.transpose();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let jw = j * cam.rotation;
    let mut cov2d = jw * cov3d * jw.transpose();
    cov2d[(0, 0)] += COV2D_REGULARIZATION;
    cov2d[(1, 1)] += COV2D_REGULARIZATION;
    // Symmetrize exactly so the conic does not carry rounding asymmetry.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -off / det, cov2d[(0, 0)] / det];
    let (opacity, color) = g.activate();
    let splat = Splat2D {
        mean2d: Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy),
        cov2d,
        conic,
        depth: z,
        opacity,
        color,
        source_index: index,
        radius: Vector2::new(3.0 * cov2d[(0, 0)].sqrt(), 3.0 * cov2d[(1, 1)].sqrt()),
    };
    let cache = ProjCache {
        cam_pos: pc,
        jw,
        cov3d,
        rot,
        scale,
        quat: g.rotation,
    };
    Some((splat, cache))
}

/// Perspective projection of one Gaussian; `None` when it lies behind the
/// near plane or has a degenerate rotation.
pub fn project(g: &Gaussian3D, cam: &Camera) -> Option<Splat2D> {
    project_cached(g, 0, cam).map(|(s, _)| s)
}

/// Gaussian exponent `-½ Δᵀ Σ⁻¹ Δ` at pixel `(px, py)`.
#[inline]
pub fn splat_power(conic: &[f64; 3], dx: f64, dy: f64) -> f64 {
    -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy
}

/// Total order used for depth sorting. Ties in depth fall back to the
/// parameter values so the order never depends on input position.
fn depth_order(a: &(Splat2D, ProjCache, [f64; 14]), b: &(Splat2D, ProjCache, [f64; 14])) -> Ordering {
    a.0.depth.total_cmp(&b.0.depth).then_with(|| {
        a.2.iter()
            .zip(&b.2)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    /// Indices into the sorted splat list, per tile, in depth order.
    lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn tile_bounds(&self, t: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        (x0, y0, (x0 + TILE).min(w), (y0 + TILE).min(h))
    }
}

/// Pixel range `[lo, hi]` covered by `[c - r, c + r]`, clipped to `[0, n)`.
fn pixel_span(c: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (c - r).ceil().max(0.0);
    let hi = (c + r).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Forward render result. Keeps the sorted splats and tile lists so
/// [`RenderOutput::backward`] can replay compositing.
pub struct RenderOutput {
    pub color: ImageRgb,
    pub final_transmittance: ImageGray,
    /// Number of splat evaluations consumed per pixel (contributors plus
    /// skipped out-of-ellipse candidates), used to replay the pixel.
    pub last_contributor: Vec<u32>,
    pub background: Vector3<f64>,
    pub splats: Vec<Splat2D>,
    caches: Vec<ProjCache>,
    tiles: TileGrid,
    num_gaussians: usize,
}

/// One composited contribution at a pixel.
#[derive(Clone, Copy)]
struct Hit {
    splat: u32,
    alpha: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
    transmittance: f64,
}

/// Front-to-back compositing of one pixel over a depth-sorted candidate list.
/// Returns `(color, final transmittance, candidates consumed)`.
#[inline]
fn composite_pixel(
    splats: &[Splat2D],
    list: &[u32],
    px: f64,
    py: f64,
    bg: &Vector3<f64>,
    mut hits: Option<&mut Vec<Hit>>,
) -> (Vector3<f64>, f64, usize) {
    let mut t = 1.0;
    let mut c = Vector3::zeros();
    let mut consumed = 0;
    for &si in list {
        consumed += 1;
        let s = &splats[si as usize];
        let dx = px - s.mean2d.x;
        let dy = py - s.mean2d.y;
        let power = splat_power(&s.conic, dx, dy);
        if power < POWER_CUTOFF {
            continue;
        }
        let raw = s.opacity * power.exp();
        let (alpha, clamped) = if raw > MAX_ALPHA { (MAX_ALPHA, true) } else { (raw, false) };
        c += s.color * (alpha * t);
        if let Some(h) = hits.as_deref_mut() {
            h.push(Hit {
                splat: si,
                alpha,
                clamped,
                dx,
                dy,
                transmittance: t,
            });
        }
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    (c + bg * t, t, consumed)
}

/// Renders `gaussians` from `cam` over a constant background.
pub fn render(gaussians: &[Gaussian3D], cam: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    cam.validate()?;
    for (index, g) in gaussians.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteParameter { index });
        }
        if g.rotation.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateRotation);
        }
    }
    let (w, h) = (cam.width, cam.height);
    let mut projected: Vec<(Splat2D, ProjCache, [f64; 14])> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_cached(g, i, cam).map(|(s, c)| (s, c, g.to_array())))
        .filter(|(s, _, _)| {
            pixel_span(s.mean2d.x, s.radius.x, w).is_some() && pixel_span(s.mean2d.y, s.radius.y, h).is_some()
        })
        .collect();
    projected.sort_by(depth_order);
    let (splats, caches): (Vec<_>, Vec<_>) = projected.into_iter().map(|(s, c, _)| (s, c)).unzip();

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let (Some((x0, x1)), Some((y0, y1))) =
            (pixel_span(s.mean2d.x, s.radius.x, w), pixel_span(s.mean2d.y, s.radius.y, h))
        else {
            continue;
        };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    let tiles = TileGrid { tiles_x, tiles_y, lists };
    let bg = Vector3::from(background);

    let tile_results: Vec<Vec<(usize, Vector3<f64>, f64, u32)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tiles.tile_bounds(t, w, h);
            let list = &tiles.lists[t];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (c, tr, n) = composite_pixel(&splats, list, x as f64, y as f64, &bg, None);
                    out.push((y * w + x, c, tr, n as u32));
                }
            }
            out
        })
        .collect();

    let mut color = ImageRgb::new(w, h);
    let mut final_transmittance = ImageGray::new(w, h);
    let mut last_contributor = vec![0u32; w * h];
    for (p, c, tr, n) in tile_results.into_iter().flatten() {
        color.data[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
        final_transmittance.data[p] = tr;
        last_contributor[p] = n;
    }
    Ok(RenderOutput {
        color,
        final_transmittance,
        last_contributor,
        background: bg,
        splats,
        caches,
        tiles,
        num_gaussians: gaussians.len(),
    })
}

/// Screen-space gradient of one splat: mean2d (2), conic (3), opacity, color (3).
type SplatGrad = [f64; 9];

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Gradient of a scalar loss w.r.t. every Gaussian parameter, given the
    /// loss gradient w.r.t. the rendered color. Flat layout: 14 values per
    /// Gaussian in [`Gaussian3D::to_array`] order; non-contributors get 0.
    pub fn backward(&self, cam: &Camera, d_color: &ImageRgb) -> Result<Vec<f64>> {
        let (w, h) = (self.width(), self.height());
        d_color.check_same_dims((w, h), "render backward")?;
        let splats = &self.splats;
        let tiles = &self.tiles;

        // Each tile accumulates into a buffer indexed like its candidate
        // list; buffers are then reduced in tile order, so the result does
        // not depend on thread scheduling.
        let tile_grads: Vec<Vec<SplatGrad>> = (0..tiles.tiles_x * tiles.tiles_y)
            .into_par_iter()
            .map(|t| {
                let list = &tiles.lists[t];
                let mut local = vec![[0.0; 9]; list.len()];
                if list.is_empty() {
                    return local;
                }
                let (x0, y0, x1, y1) = tiles.tile_bounds(t, w, h);
                let mut hits = Vec::new();
                let mut slot = vec![0usize; 0];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = y * w + x;
                        let g = Vector3::new(d_color.data[3 * p], d_color.data[3 * p + 1], d_color.data[3 * p + 2]);
                        if g == Vector3::zeros() {
                            continue;
                        }
                        hits.clear();
                        let n = self.last_contributor[p] as usize;
                        let (_, t_final, _) =
                            composite_pixel(splats, &list[..n], x as f64, y as f64, &self.background, Some(&mut hits));
                        slot.clear();
                        // Position of each hit in the tile list (lists are sorted).
                        let mut cursor = 0;
                        for hit in &hits {
                            while list[cursor] != hit.splat {
                                cursor += 1;
                            }
                            slot.push(cursor);
                        }
                        // Color still to come behind the current splat, incl. background.
                        let mut behind = self.background * t_final;
                        for (hit, &k) in hits.iter().zip(&slot).rev() {
                            let s = &splats[hit.splat as usize];
                            let wgt = hit.alpha * hit.transmittance;
                            let gr = &mut local[k];
                            gr[6] += wgt * g.x;
                            gr[7] += wgt * g.y;
                            gr[8] += wgt * g.z;
                            let dc_da = s.color * hit.transmittance - behind / (1.0 - hit.alpha);
                            behind += s.color * wgt;
                            if hit.clamped {
                                continue;
                            }
                            let dl_da = g.dot(&dc_da);
                            gr[5] += dl_da * splat_power(&s.conic, hit.dx, hit.dy).exp();
                            let dl_dpower = dl_da * hit.alpha;
                            let (dx, dy) = (hit.dx, hit.dy);
                            let cn = &s.conic;
                            // dx = px - mean.x, so d(power)/d(mean) = -d(power)/d(dx).
                            gr[0] += dl_dpower * (cn[0] * dx + cn[1] * dy);
                            gr[1] += dl_dpower * (cn[2] * dy + cn[1] * dx);
                            gr[2] += dl_dpower * (-0.5 * dx * dx);
                            gr[3] += dl_dpower * (-dx * dy);
                            gr[4] += dl_dpower * (-0.5 * dy * dy);
                        }
                    }
                }
                local
            })
            .collect();

        let mut screen = vec![[0.0; 9]; splats.len()];
        for (t, local) in tile_grads.iter().enumerate() {
            for (&si, gr) in tiles.lists[t].iter().zip(local) {
                let acc = &mut screen[si as usize];
                for (a, b) in acc.iter_mut().zip(gr) {
                    *a += b;
                }
            }
        }

        let mut out = vec![0.0; self.num_gaussians * Gaussian3D::NUM_PARAMS];
        for ((s, cache), gr) in splats.iter().zip(&self.caches).zip(&screen) {
            let grad = splat_backward(s, cache, cam, gr);
            let base = s.source_index * Gaussian3D::NUM_PARAMS;
            out[base..base + Gaussian3D::NUM_PARAMS].copy_from_slice(&grad);
        }
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        Ok(out)
    }
}

/// Chain rule from screen-space gradients to the raw Gaussian parameters.
fn splat_backward(s: &Splat2D, c: &ProjCache, cam: &Camera, gr: &SplatGrad) -> [f64; 14] {
    let mut out = [0.0; 14];
    if gr.iter().all(|v| *v == 0.0) {
        return out;
    }
    // Conic gradient as a symmetric matrix, then through the 2×2 inverse.
    let g_conic = Matrix2::new(gr[2], 0.5 * gr[3], 0.5 * gr[3], gr[4]);
    let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_cov2d = -(conic * g_conic * conic);

    let g_cov3d = c.jw.transpose() * g_cov2d * c.jw;
    let g_jw = 2.0 * g_cov2d * c.jw * c.cov3d;
    let g_j = g_jw * cam.rotation.transpose();

    let (x, y, z) = (c.cam_pos.x, c.cam_pos.y, c.cam_pos.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let g_pc = Vector3::new(
        gr[0] * fx / z + g_j[(0, 2)] * (-fx / z2),
        gr[1] * fy / z + g_j[(1, 2)] * (-fy / z2),
        gr[0] * (-fx * x / z2)
            + gr[1] * (-fy * y / z2)
            + g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * x / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * y / z3),
    );
    let g_pos = cam.rotation.transpose() * g_pc;

    // Σ = M Mᵀ with M = R·S.
    let m = c.rot * Matrix3::from_diagonal(&c.scale);
    let g_m = 2.0 * g_cov3d * m;
    let rt_gm = c.rot.transpose() * g_m;
    let mut g_rot = g_m;
    for j in 0..3 {
        for i in 0..3 {
            g_rot[(i, j)] *= c.scale[j];
        }
    }
    let g_q = quat_to_matrix_backward(c.quat, &g_rot);

    out[0..3].copy_from_slice(g_pos.as_slice());
    for i in 0..3 {
        out[3 + i] = rt_gm[(i, i)] * c.scale[i];
    }
    out[6..10].copy_from_slice(&g_q);
    out[10] = gr[5] * s.opacity * (1.0 - s.opacity);
    for i in 0..3 {
        out[11 + i] = gr[6 + i] * s.color[i] * (1.0 - s.color[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian3D> {
        (0..n)
            .map(|_| {
                let mut g = Gaussian3D::new(
                    Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.5..4.0)),
                    rng.random_range(0.08..0.25),
                    rng.random_range(0.2..0.8),
                    [rng.random(), rng.random(), rng.random()],
                );
                g.log_scale += Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
                g.rotation = [rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                g
            })
            .collect()
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let cam = axis_camera(21, 17, 30.0);
        let g = Gaussian3D::new(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.5, [0.5; 3]);
        let s = project(&g, &cam).unwrap();
        assert!((s.mean2d - Vector2::new(cam.cx, cam.cy)).norm() < 1e-12);
        assert!((s.depth - 3.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_cov_projects_isotropically() {
        let (f, sigma, d) = (40.0, 0.2, 4.0);
        let cam = axis_camera(32, 32, f);
        let g = Gaussian3D::new(Vector3::new(0.0, 0.0, d), sigma, 0.5, [0.5; 3]);
        let s = project(&g, &cam).unwrap();
        let expected = f * f * sigma * sigma / (d * d) + COV2D_REGULARIZATION;
        assert!((s.cov2d - Matrix2::identity() * expected).amax() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(8, 8, 10.0);
        assert!(project(&Gaussian3D::new(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.5, [0.5; 3]), &cam).is_none());
        assert!(project(&Gaussian3D::new(Vector3::new(0.0, 0.0, 0.005), 0.1, 0.5, [0.5; 3]), &cam).is_none());
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = axis_camera(20, 18, 10.0);
        let out = render(&[], &cam, [0.2, 0.2, 0.2]).unwrap();
        assert!(out.color.data.iter().all(|&v| v == 0.2));
        assert!(out.final_transmittance.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_gaussian_at_its_mean() {
        let cam = axis_camera(9, 9, 20.0);
        let g = Gaussian3D::new(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.6, [1.0, 0.0, 0.0]);
        let mut g = g;
        g.color_raw = Vector3::new(60.0, -60.0, -60.0);
        let out = render(&[g], &cam, [0.0; 3]).unwrap();
        let p = out.color.pixel(4, 4);
        assert!((p[0] - 0.6).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2].abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn two_coincident_splats() {
        let cam = axis_camera(9, 9, 20.0);
        let mut front = Gaussian3D::new(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.5, [0.0; 3]);
        front.color_raw = Vector3::new(60.0, -60.0, -60.0);
        let mut back = Gaussian3D::new(Vector3::new(0.0, 0.0, 3.0 + 1e-9), 0.1, 0.5, [0.0; 3]);
        back.color_raw = Vector3::new(-60.0, 60.0, -60.0);
        // 3 + 1e-9 projects to the same pixel center.
        let out = render(&[back, front], &cam, [0.0; 3]).unwrap();
        let p = out.color.pixel(4, 4);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12 && p[2].abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn non_finite_parameter_reports_index() {
        let cam = axis_camera(8, 8, 10.0);
        let mut scene = vec![Gaussian3D::new(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.5, [0.5; 3]); 3];
        scene[2].opacity_logit = f64::NAN;
        match render(&scene, &cam, [0.0; 3]) {
            Err(Error::NonFiniteParameter { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn telescoping_and_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = axis_camera(40, 32, 35.0);
        let scene = random_scene(&mut rng, 25);
        let bg = [0.3, 0.1, 0.7];
        let out = render(&scene, &cam, bg).unwrap();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let mut hits = Vec::new();
                let t = x / TILE + (y / TILE) * out.tiles.tiles_x;
                let (_, tf, _) =
                    composite_pixel(&out.splats, &out.tiles.lists[t], x as f64, y as f64, &out.background, Some(&mut hits));
                let wsum: f64 = hits.iter().map(|h| h.alpha * h.transmittance).sum();
                assert!((wsum + tf - 1.0).abs() < 1e-12);
                let p = out.color.pixel(x, y);
                for c in 0..3 {
                    let lo = hits.iter().map(|h| out.splats[h.splat as usize].color[c]).fold(bg[c], f64::min);
                    let hi = hits.iter().map(|h| out.splats[h.splat as usize].color[c]).fold(bg[c], f64::max);
                    assert!(p[c] >= lo - 1e-12 && p[c] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = axis_camera(33, 29, 30.0);
        let scene = random_scene(&mut rng, 30);
        let a = render(&scene, &cam, [0.0; 3]).unwrap();
        let mut shuffled = scene.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let b = render(&shuffled, &cam, [0.0; 3]).unwrap();
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.final_transmittance.data, b.final_transmittance.data);
    }

    #[test]
    fn more_front_opacity_never_raises_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = axis_camera(32, 32, 30.0);
        let mut scene = random_scene(&mut rng, 12);
        let front = (0..scene.len())
            .min_by(|&a, &b| scene[a].position.z.total_cmp(&scene[b].position.z))
            .unwrap();
        let before = render(&scene, &cam, [0.0; 3]).unwrap();
        scene[front].opacity_logit += 1.0;
        let after = render(&scene, &cam, [0.0; 3]).unwrap();
        for (a, b) in after.final_transmittance.data.iter().zip(&before.final_transmittance.data) {
            assert!(*a <= *b + 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = axis_camera(24, 24, 25.0);
        let scene = random_scene(&mut rng, 5);
        let out = render(&scene, &cam, [0.0; 3]).unwrap();
        let g = out.backward(&cam, &ImageRgb::new(24, 24)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(out.backward(&cam, &ImageRgb::new(23, 24)).is_err());
    }

    #[test]
    fn opacity_gradient_of_red_channel_at_mean() {
        let cam = axis_camera(9, 9, 20.0);
        let g = Gaussian3D::new(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.6, [0.7, 0.2, 0.1]);
        let out = render(std::slice::from_ref(&g), &cam, [0.0; 3]).unwrap();
        let mut up = ImageRgb::new(9, 9);
        up.set_pixel(4, 4, [1.0, 0.0, 0.0]);
        let grad = out.backward(&cam, &up).unwrap();
        let (o, c) = g.activate();
        assert!((grad[10] - o * (1.0 - o) * c.x).abs() < 1e-12);
    }
}
