//! Composite reconstruction loss of the splatting branch.
//!
//! `w_l1·mean|I_r − GT| + w_ssim·(1 − SSIM) + w_edge·mean|∇I_r − ∇GT| +
//! w_cons·mean|Φ_rgb(I_r) − Φ_therm(T)|`, where `∇` is the set of forward
//! differences along x and y and the last term anchors the render to the
//! thermal structure.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::ssim_with_grad;
use crate::retinex::sign;
use crate::scene::{ImageGray, ImageRgb};
use crate::thermal::{gray_to_rgb_grad, phi_rgb, phi_therm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsLossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
    pub consistency: f64,
}

impl Default for GsLossWeights {
    fn default() -> Self {
        Self {
            l1: 0.7,
            ssim: 0.2,
            edge: 0.1,
            consistency: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsLoss {
    pub total: f64,
    pub l1: f64,
    /// `1 − SSIM`
    pub dssim: f64,
    pub edge: f64,
    pub consistency: f64,
    pub d_rendered: ImageRgb,
    /// Gradient w.r.t. the target, used to couple the enhancer to the
    /// reconstruction loss through the evolving target.
    pub d_target: ImageRgb,
}

pub fn gs_loss(rendered: &ImageRgb, target: &ImageRgb, thermal: &ImageGray, w: &GsLossWeights) -> Result<GsLoss> {
    let dims = rendered.dims();
    target.check_same_dims(dims, "gs_loss target")?;
    thermal.check_same_dims(dims, "gs_loss thermal")?;
    let (width, height) = dims;
    let mut d_r = ImageRgb::new(width, height);
    let mut d_t = ImageRgb::new(width, height);

    let n = rendered.data.len() as f64;
    let mut l1 = 0.0;
    for i in 0..rendered.data.len() {
        let d = rendered.data[i] - target.data[i];
        l1 += d.abs();
        let g = w.l1 * sign(d) / n;
        d_r.data[i] += g;
        d_t.data[i] -= g;
    }
    l1 /= n;

    let mut dssim = 0.0;
    if w.ssim != 0.0 {
        let (s, ga, gb) = ssim_with_grad(rendered, target)?;
        dssim = 1.0 - s;
        for i in 0..d_r.data.len() {
            d_r.data[i] -= w.ssim * ga.data[i];
            d_t.data[i] -= w.ssim * gb.data[i];
        }
    }

    let mut edge = 0.0;
    let pairs = 3 * ((width.saturating_sub(1)) * height + width * (height.saturating_sub(1)));
    if w.edge != 0.0 && pairs > 0 {
        let scale = w.edge / pairs as f64;
        let mut visit = |a: usize, b: usize| {
            let d = (rendered.data[b] - rendered.data[a]) - (target.data[b] - target.data[a]);
            edge += d.abs();
            let g = scale * sign(d);
            d_r.data[b] += g;
            d_r.data[a] -= g;
            d_t.data[b] -= g;
            d_t.data[a] += g;
        };
        for y in 0..height {
            for x in 0..width {
                let p = 3 * (y * width + x);
                for c in 0..3 {
                    if x + 1 < width {
                        visit(p + c, p + 3 + c);
                    }
                    if y + 1 < height {
                        visit(p + c, p + 3 * width + c);
                    }
                }
            }
        }
        edge /= pairs as f64;
    }

    let mut consistency = 0.0;
    if w.consistency != 0.0 {
        let a_r = phi_rgb(rendered);
        let a_t = phi_therm(thermal);
        let np = a_r.image.data.len() as f64;
        let mut g = vec![0.0; a_r.image.data.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let d = a_r.image.data[i] - a_t.image.data[i];
            consistency += d.abs();
            *gi = w.consistency * sign(d) / np;
        }
        consistency /= np;
        let d_rgb = gray_to_rgb_grad(&a_r.backward(&g), width, height);
        for (a, b) in d_r.data.iter_mut().zip(&d_rgb.data) {
            *a += b;
        }
    }

    Ok(GsLoss {
        total: w.l1 * l1 + w.ssim * dssim + w.edge * edge + w.consistency * consistency,
        l1,
        dssim,
        edge,
        consistency,
        d_rendered: d_r,
        d_target: d_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageRgb {
        ImageRgb::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identity_with_aligned_thermal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random(&mut rng, 16, 12);
        let thermal = img.luma();
        let l = gs_loss(&img, &img, &thermal, &GsLossWeights::default()).unwrap();
        assert!(l.total <= 1e-9, "{}", l.total);
    }

    #[test]
    fn constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = ImageRgb::from_fn(14, 13, |_, _| [rng.random_range(0.0..0.8); 3]);
        let r = ImageRgb {
            data: gt.data.iter().map(|v| v + 0.1).collect(),
            ..gt.clone()
        };
        let w = GsLossWeights {
            ssim: 0.0,
            consistency: 0.0,
            ..Default::default()
        };
        let l = gs_loss(&r, &gt, &ImageGray::new(14, 13), &w).unwrap();
        assert!((w.l1 * l.l1 - 0.07).abs() < 1e-12);
        assert!(l.edge < 1e-12);
        let n = r.data.len() as f64;
        // Edge differences are all exactly equal up to rounding; their sign
        // terms may be nonzero, so only the L1 part is checked per pixel.
        let w_l1 = GsLossWeights {
            l1: 0.7,
            ssim: 0.0,
            edge: 0.0,
            consistency: 0.0,
        };
        let l = gs_loss(&r, &gt, &ImageGray::new(14, 13), &w_l1).unwrap();
        assert!(l.d_rendered.data.iter().all(|g| (g - 0.7 / n).abs() < 1e-15));
    }

    fn total(r: &ImageRgb, t: &ImageRgb, th: &ImageGray) -> f64 {
        gs_loss(r, t, th, &GsLossWeights::default()).unwrap().total
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(&mut rng, 16, 16);
        let t = random(&mut rng, 16, 16);
        let th = ImageGray::from_fn(16, 16, |_, _| rng.random());
        let l = gs_loss(&r, &t, &th, &GsLossWeights::default()).unwrap();
        let h = 1e-6;
        for k in (0..r.data.len()).step_by(5) {
            let mut p = r.clone();
            let mut m = r.clone();
            p.data[k] += h;
            m.data[k] -= h;
            let fd = (total(&p, &t, &th) - total(&m, &t, &th)) / (2.0 * h);
            let a = l.d_rendered.data[k];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-6), "r[{k}] {fd} vs {a}");
            let mut p = t.clone();
            let mut m = t.clone();
            p.data[k] += h;
            m.data[k] -= h;
            let fd = (total(&r, &p, &th) - total(&r, &m, &th)) / (2.0 * h);
            let a = l.d_target.data[k];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-6), "t[{k}] {fd} vs {a}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = ImageRgb::new(12, 12);
        assert!(gs_loss(&a, &ImageRgb::new(12, 11), &ImageGray::new(12, 12), &GsLossWeights::default()).is_err());
        assert!(gs_loss(&a, &a, &ImageGray::new(11, 12), &GsLossWeights::default()).is_err());
    }
}
