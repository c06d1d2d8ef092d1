//! Cross-modal alignment maps and the dual-term thermal consistency loss.
//!
//! RGB images are reduced to luma and min–max normalized; thermal images are
//! min–max normalized directly. A constant image normalizes to all zeros.
//! For gradients the argmin/argmax pixels are held fixed (first occurrence on
//! ties), which is the exact derivative away from ties.

use crate::error::{Error, Result};
use crate::retinex::sign;
use crate::scene::{ImageGray, ImageRgb, LUMA};

/// Thermal weight `γ` of the enhancement-vs-render term.
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedGray {
    pub image: ImageGray,
    pub min: f64,
    pub max: f64,
    argmin: usize,
    argmax: usize,
}

impl AlignedGray {
    fn normalize(src: ImageGray) -> Self {
        let mut argmin = 0;
        let mut argmax = 0;
        for (i, &v) in src.data.iter().enumerate() {
            if v < src.data[argmin] {
                argmin = i;
            }
            if v > src.data[argmax] {
                argmax = i;
            }
        }
        let (min, max) = if src.data.is_empty() {
            (0.0, 0.0)
        } else {
            (src.data[argmin], src.data[argmax])
        };
        let range = max - min;
        let data = if range > 0.0 {
            src.data.iter().map(|v| (v - min) / range).collect()
        } else {
            vec![0.0; src.data.len()]
        };
        Self {
            image: ImageGray {
                width: src.width,
                height: src.height,
                data,
            },
            min,
            max,
            argmin,
            argmax,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }

    /// Gradient w.r.t. the pre-normalization gray values, given the gradient
    /// w.r.t. the normalized values.
    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        let n = upstream.len();
        let mut d = vec![0.0; n];
        if self.is_degenerate() {
            return d;
        }
        let r = self.max - self.min;
        let mut sum_g = 0.0;
        let mut sum_gn = 0.0;
        for i in 0..n {
            d[i] = upstream[i] / r;
            sum_g += upstream[i];
            sum_gn += upstream[i] * self.image.data[i];
        }
        d[self.argmin] += (sum_gn - sum_g) / r;
        d[self.argmax] -= sum_gn / r;
        d
    }
}

/// Per-image luma, min–max normalized.
pub fn phi_rgb(img: &ImageRgb) -> AlignedGray {
    AlignedGray::normalize(img.luma())
}

/// Min–max normalized thermal image.
pub fn phi_therm(img: &ImageGray) -> AlignedGray {
    AlignedGray::normalize(img.clone())
}

/// Same computation as [`phi_rgb`], applied to the enhanced image so it
/// lives in the thermal range.
pub fn phi_cross(img: &ImageRgb) -> AlignedGray {
    phi_rgb(img)
}

pub(crate) fn gray_to_rgb_grad(d_gray: &[f64], width: usize, height: usize) -> ImageRgb {
    let mut out = ImageRgb::new(width, height);
    for (px, g) in out.data.chunks_exact_mut(3).zip(d_gray) {
        for c in 0..3 {
            px[c] = g * LUMA[c];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThermalLoss {
    pub total: f64,
    /// `mean|Φ_rgb(I_enh) − Φ_rgb(I_rendered)|`
    pub render_term: f64,
    /// `mean|Φ_cross(I_enh) − Φ_therm(I_therm)|`
    pub thermal_term: f64,
    pub d_enhanced: ImageRgb,
    pub d_rendered: ImageRgb,
}

/// `γ·mean|Φ_rgb(I_enh) − Φ_rgb(I_rendered)| + (1−γ)·mean|Φ_cross(I_enh) − Φ_therm(I_therm)|`
pub fn thermal_loss(
    enhanced: &ImageRgb,
    rendered: &ImageRgb,
    thermal: &ImageGray,
    gamma: f64,
) -> Result<ThermalLoss> {
    let dims = enhanced.dims();
    rendered.check_same_dims(dims, "thermal_loss rendered")?;
    thermal.check_same_dims(dims, "thermal_loss thermal")?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("thermal gamma {gamma} outside [0, 1]")));
    }
    let n = enhanced.num_pixels();
    let a_enh = phi_rgb(enhanced);
    let a_ren = phi_rgb(rendered);
    let a_cross = phi_cross(enhanced);
    let a_therm = phi_therm(thermal);

    let mut render_term = 0.0;
    let mut thermal_term = 0.0;
    let mut g_enh = vec![0.0; n];
    let mut g_ren = vec![0.0; n];
    let mut g_cross = vec![0.0; n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let d1 = a_enh.image.data[i] - a_ren.image.data[i];
        render_term += d1.abs();
        let s1 = gamma * sign(d1) * inv_n;
        g_enh[i] = s1;
        g_ren[i] = -s1;

        let d2 = a_cross.image.data[i] - a_therm.image.data[i];
        thermal_term += d2.abs();
        g_cross[i] = (1.0 - gamma) * sign(d2) * inv_n;
    }
    render_term *= inv_n;
    thermal_term *= inv_n;

    let mut d_enh_gray = a_enh.backward(&g_enh);
    for (a, b) in d_enh_gray.iter_mut().zip(a_cross.backward(&g_cross)) {
        *a += b;
    }
    let d_ren_gray = a_ren.backward(&g_ren);
    let (w, h) = dims;
    Ok(ThermalLoss {
        total: gamma * render_term + (1.0 - gamma) * thermal_term,
        render_term,
        thermal_term,
        d_enhanced: gray_to_rgb_grad(&d_enh_gray, w, h),
        d_rendered: gray_to_rgb_grad(&d_ren_gray, w, h),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn luma_ramp_normalizes_to_unit_ramp() {
        let img = ImageRgb::from_fn(5, 1, |x, _| [0.2 + 0.1 * x as f64; 3]);
        let a = phi_rgb(&img);
        for (x, v) in a.image.data.iter().enumerate() {
            assert!((v - 0.25 * x as f64).abs() < 1e-12);
        }
        let c = phi_cross(&img);
        assert_eq!(a, c);
    }

    #[test]
    fn constant_images_collapse_to_zero() {
        assert!(phi_rgb(&ImageRgb::filled(3, 3, [0.5; 3])).image.data.iter().all(|&v| v == 0.0));
        let t = phi_therm(&ImageGray::filled(3, 3, 0.7));
        assert!(t.is_degenerate());
        assert!(t.image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn red_green_pair() {
        let img = ImageRgb {
            width: 2,
            height: 1,
            data: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        };
        let a = phi_rgb(&img);
        assert_eq!(a.min, 0.299);
        assert_eq!(a.max, 0.587);
        assert_eq!(a.image.data, vec![0.0, 1.0]);
    }

    #[test]
    fn thermal_normalization() {
        let t = ImageGray {
            width: 3,
            height: 1,
            data: vec![0.1, 0.5, 0.9],
        };
        let a = phi_therm(&t);
        assert!((a.image.data[0]).abs() < 1e-15);
        assert!((a.image.data[1] - 0.5).abs() < 1e-12);
        assert!((a.image.data[2] - 1.0).abs() < 1e-15);
        let unit = ImageGray {
            width: 3,
            height: 1,
            data: vec![0.0, 0.3, 1.0],
        };
        assert_eq!(phi_therm(&unit).image, unit);
    }

    #[test]
    fn self_consistent_fixture_has_zero_loss() {
        let enh = ImageRgb::from_fn(4, 3, |x, y| [0.1 * x as f64 + 0.05 * y as f64; 3]);
        let thermal = enh.luma();
        let l = thermal_loss(&enh, &enh, &thermal, DEFAULT_GAMMA).unwrap();
        assert!(l.total.abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_keeps_only_thermal_term() {
        let enh = ImageRgb::from_fn(3, 3, |x, y| [0.1 * x as f64, 0.2 * y as f64, 0.3]);
        let ren = ImageRgb::filled(3, 3, [0.2; 3]);
        let therm = ImageGray::from_fn(3, 3, |x, y| (x * y) as f64);
        let l = thermal_loss(&enh, &ren, &therm, 0.0).unwrap();
        assert_eq!(l.total, l.thermal_term);
        assert!(l.d_rendered.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let a = ImageRgb::new(2, 2);
        let b = ImageRgb::new(3, 2);
        assert!(matches!(
            thermal_loss(&a, &b, &ImageGray::new(2, 2), 0.1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn flat_loss(v: &[f64], w: usize, h: usize, therm: &ImageGray) -> f64 {
        let n = w * h * 3;
        let e = ImageRgb { width: w, height: h, data: v[..n].to_vec() };
        let r = ImageRgb { width: w, height: h, data: v[n..].to_vec() };
        thermal_loss(&e, &r, therm, DEFAULT_GAMMA).unwrap().total
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (w, h) = (8, 8);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v: Vec<f64> = (0..w * h * 6).map(|_| rng.random_range(0.05..0.95)).collect();
            let therm = ImageGray::from_fn(w, h, |_, _| rng.random_range(0.0..1.0));
            let n = w * h * 3;
            let e = ImageRgb { width: w, height: h, data: v[..n].to_vec() };
            let r = ImageRgb { width: w, height: h, data: v[n..].to_vec() };
            let l = thermal_loss(&e, &r, &therm, DEFAULT_GAMMA).unwrap();
            let mut analytic = l.d_enhanced.data.clone();
            analytic.extend_from_slice(&l.d_rendered.data);
            let hstep = 1e-6;
            for k in 0..v.len() {
                let orig = v[k];
                v[k] = orig + hstep;
                let fp = flat_loss(&v, w, h, &therm);
                v[k] = orig - hstep;
                let fm = flat_loss(&v, w, h, &therm);
                v[k] = orig;
                let fd = (fp - fm) / (2.0 * hstep);
                let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} k {k}: fd {fd} vs {}", analytic[k]);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn bounded_symmetric_and_affine_invariant(seed in 0u64..500, a in 0.1f64..5.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| ImageRgb::from_fn(5, 4, |_, _| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
            let e = mk(&mut rng);
            let r = mk(&mut rng);
            let t = ImageGray::from_fn(5, 4, |_, _| rng.random_range(0.0..1.0));
            let l = thermal_loss(&e, &r, &t, 0.1).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&l.total));
            let swapped = thermal_loss(&r, &e, &t, 0.1).unwrap();
            proptest::prop_assert!((swapped.render_term - l.render_term).abs() < 1e-12);
            let t2 = ImageGray { width: 5, height: 4, data: t.data.iter().map(|v| a * v + b).collect() };
            let l2 = thermal_loss(&e, &r, &t2, 0.1).unwrap();
            proptest::prop_assert!((l2.total - l.total).abs() < 1e-12);
        }
    }
}
