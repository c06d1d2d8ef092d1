//! Central finite-difference check of the renderer gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamClass;
use crate::scene::{Camera, Gaussian3D, ImageRgb};

use super::render;

/// Scalar loss on a rendered image.
#[derive(Clone, Debug)]
pub enum LossSpec {
    /// Mean absolute difference to a target.
    L1(ImageRgb),
    /// Mean squared difference to a target.
    L2(ImageRgb),
    /// Red channel of a single pixel.
    RedChannelAt { x: usize, y: usize },
}

impl LossSpec {
    pub fn value_and_grad(&self, img: &ImageRgb) -> Result<(f64, ImageRgb)> {
        let mut g = ImageRgb::new(img.width, img.height);
        let value = match self {
            LossSpec::L1(t) | LossSpec::L2(t) => {
                t.check_same_dims(img.dims(), "gradcheck target")?;
                let n = img.data.len() as f64;
                let l2 = matches!(self, LossSpec::L2(_));
                let mut v = 0.0;
                for ((gi, a), b) in g.data.iter_mut().zip(&img.data).zip(&t.data) {
                    let d = a - b;
                    if l2 {
                        v += d * d;
                        *gi = 2.0 * d / n;
                    } else {
                        v += d.abs();
                        *gi = crate::retinex::sign(d) / n;
                    }
                }
                v / n
            }
            LossSpec::RedChannelAt { x, y } => {
                if *x >= img.width || *y >= img.height {
                    return Err(Error::InvalidConfig(format!("pixel ({x}, {y}) outside image")));
                }
                g.set_pixel(*x, *y, [1.0, 0.0, 0.0]);
                img.pixel(*x, *y)[0]
            }
        };
        Ok((value, g))
    }
}

/// Relative-error floor; keeps near-zero gradients from dominating.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// One-sided slopes differing by more than this mean the step crossed the
/// 3σ cutoff, where the loss jumps and central differences are invalid.
pub const DISCONTINUITY_SLOPE_GAP: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassError {
    pub class: ParamClass,
    pub count: usize,
    /// Samples not compared because the step straddled a discontinuity.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub classes: Vec<ClassError>,
    pub passed: bool,
}

impl GradcheckReport {
    /// Builds a report from `(class, analytic, numeric)` triples; a `None`
    /// numeric value marks a skipped sample.
    pub fn from_samples(samples: &[(ParamClass, f64, Option<f64>)], step: f64, tolerance: f64) -> Self {
        let mut order: Vec<ParamClass> = Vec::new();
        for (c, _, _) in samples {
            if !order.contains(c) {
                order.push(*c);
            }
        }
        let classes: Vec<ClassError> = order
            .into_iter()
            .map(|class| {
                let of_class = samples.iter().filter(|s| s.0 == class);
                let errs: Vec<f64> = of_class.clone().filter_map(|&(_, a, n)| Some(relative_error(a, n?))).collect();
                let max = errs.iter().copied().fold(0.0, f64::max);
                let mean = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
                ClassError {
                    class,
                    count: errs.len(),
                    skipped: of_class.count() - errs.len(),
                    max_rel_error: max,
                    mean_rel_error: mean,
                    passed: max <= tolerance,
                }
            })
            .collect();
        let passed = classes.iter().all(|c| c.passed);
        Self {
            tolerance,
            step,
            classes,
            passed,
        }
    }

    pub fn merge(reports: &[GradcheckReport]) -> Option<Self> {
        let first = reports.first()?;
        let mut classes: Vec<ClassError> = Vec::new();
        for r in reports {
            for c in &r.classes {
                match classes.iter_mut().find(|x| x.class == c.class) {
                    Some(acc) => {
                        let total = acc.count + c.count;
                        if total > 0 {
                            acc.mean_rel_error = (acc.mean_rel_error * acc.count as f64
                                + c.mean_rel_error * c.count as f64)
                                / total as f64;
                        }
                        acc.max_rel_error = acc.max_rel_error.max(c.max_rel_error);
                        acc.count = total;
                        acc.skipped += c.skipped;
                        acc.passed &= c.passed;
                    }
                    None => classes.push(c.clone()),
                }
            }
        }
        let passed = classes.iter().all(|c| c.passed);
        Some(Self {
            tolerance: first.tolerance,
            step: first.step,
            classes,
            passed,
        })
    }

    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Checks every Gaussian parameter against central differences. Samples
/// whose forward and backward slopes disagree by more than
/// [`DISCONTINUITY_SLOPE_GAP`] are counted as skipped.
pub fn gradcheck(
    scene: &[Gaussian3D],
    cam: &Camera,
    background: [f64; 3],
    loss: &LossSpec,
    h: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    gradcheck_with(scene, cam, background, loss, h, tolerance, None)
}

/// [`gradcheck`] with an optional deliberate corruption: the analytic
/// gradient of `corrupt` is scaled by 1.1 before comparison.
pub fn gradcheck_with(
    scene: &[Gaussian3D],
    cam: &Camera,
    background: [f64; 3],
    loss: &LossSpec,
    h: f64,
    tolerance: f64,
    corrupt: Option<ParamClass>,
) -> Result<GradcheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep(h));
    }
    let out = render(scene, cam, background)?;
    let (_, d_color) = loss.value_and_grad(&out.color)?;
    let analytic = out.backward(cam, &d_color)?;
    let eval = |s: &[Gaussian3D]| -> Result<f64> { Ok(loss.value_and_grad(&render(s, cam, background)?.color)?.0) };

    let center = eval(scene)?;
    let mut samples = Vec::with_capacity(analytic.len());
    let mut work = scene.to_vec();
    for (gi, g) in scene.iter().enumerate() {
        let base = g.to_array();
        for k in 0..Gaussian3D::NUM_PARAMS {
            let mut p = base;
            p[k] = base[k] + h;
            work[gi] = Gaussian3D::from_slice(&p);
            let plus = eval(&work)?;
            p[k] = base[k] - h;
            work[gi] = Gaussian3D::from_slice(&p);
            let minus = eval(&work)?;
            work[gi] = g.clone();
            let jump = ((plus - center) / h - (center - minus) / h).abs() > DISCONTINUITY_SLOPE_GAP;
            let numeric = (!jump).then_some((plus - minus) / (2.0 * h));
            let class = ParamClass::of_gaussian_offset(k);
            let mut a = analytic[gi * Gaussian3D::NUM_PARAMS + k];
            if corrupt == Some(class) {
                a *= 1.1;
            }
            samples.push((class, a, numeric));
        }
    }
    Ok(GradcheckReport::from_samples(&samples, h, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::tests::random_scene;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize) -> Camera {
        Camera {
            fx: 22.0,
            fy: 22.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn target(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageRgb {
        ImageRgb::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn seed_zero_l1_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scene = random_scene(&mut rng, 5);
        let c = cam(24, 24);
        let t = target(&mut rng, 24, 24);
        let r = gradcheck(&scene, &c, [0.1, 0.2, 0.3], &LossSpec::L1(t), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:#?}");
        assert_eq!(r.classes.len(), 5);
    }

    #[test]
    fn l2_and_pixel_losses_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 4);
        let c = cam(20, 20);
        let t = target(&mut rng, 20, 20);
        assert!(gradcheck(&scene, &c, [0.0; 3], &LossSpec::L2(t), 1e-5, 1e-4).unwrap().passed);
        let r = gradcheck(&scene, &c, [0.0; 3], &LossSpec::RedChannelAt { x: 10, y: 9 }, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:#?}");
    }

    #[test]
    fn zero_step_rejected_and_infinite_tolerance_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(&mut rng, 3);
        let c = cam(16, 16);
        let loss = LossSpec::RedChannelAt { x: 8, y: 8 };
        assert!(matches!(gradcheck(&scene, &c, [0.0; 3], &loss, 0.0, 1e-4), Err(Error::InvalidStep(_))));
        let r = gradcheck_with(&scene, &c, [0.0; 3], &loss, 1e-3, f64::INFINITY, Some(ParamClass::Opacity)).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn corruption_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(&mut rng, 5);
        let c = cam(24, 24);
        let t = target(&mut rng, 24, 24);
        let r = gradcheck_with(&scene, &c, [0.0; 3], &LossSpec::L1(t), 1e-5, 1e-4, Some(ParamClass::Position)).unwrap();
        assert!(!r.passed);
        let pos = r.classes.iter().find(|c| c.class == ParamClass::Position).unwrap();
        assert!(!pos.passed);
        assert!(r.classes.iter().filter(|c| c.class != ParamClass::Position).all(|c| c.passed));
    }
}
