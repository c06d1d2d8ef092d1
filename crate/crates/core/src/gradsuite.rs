//! Finite-difference checks of every hand-written gradient: renderer,
//! enhancer, thermal loss and the reconstruction loss.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamClass;
use crate::render::{gradcheck_with, relative_error, GradcheckReport, LossSpec};
use crate::retinex::{enhancement_loss, EnhanceTape, EnhancementWeights, EnhancerParams};
use crate::scene::{Camera, Gaussian3D, ImageGray, ImageRgb};
use crate::schedule::{gs_loss, GsLossWeights};
use crate::thermal::{thermal_loss, DEFAULT_GAMMA};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub image_size: usize,
    pub num_gaussians: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Pixels sampled per image-gradient check.
    pub pixel_samples: usize,
    /// Scales the analytic renderer gradient of this class by 1.1.
    pub corrupt: Option<ParamClass>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            image_size: 24,
            num_gaussians: 10,
            step: 1e-5,
            tolerance: 1e-4,
            pixel_samples: 64,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub component: &'static str,
    pub quantity: String,
    pub count: usize,
    /// Renderer samples whose step straddled the 3σ cutoff.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub step: f64,
    pub tolerance: f64,
    pub lines: Vec<CheckLine>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

#[derive(Default)]
struct Acc {
    lines: Vec<(&'static str, String, usize, f64)>,
}

impl Acc {
    fn add(&mut self, component: &'static str, quantity: &str, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        match self.lines.iter_mut().find(|l| l.0 == component && l.1 == quantity) {
            Some(l) => {
                l.2 += 1;
                l.3 = l.3.max(e);
            }
            None => self.lines.push((component, quantity.to_string(), 1, e)),
        }
    }
}

/// A camera at the origin looking down +z, sized for the suite scenes.
pub fn suite_camera(size: usize) -> Camera {
    let f = 22.0 * size as f64 / 24.0;
    Camera {
        fx: f,
        fy: f,
        cx: (size as f64 - 1.0) / 2.0,
        cy: (size as f64 - 1.0) / 2.0,
        width: size,
        height: size,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
    }
}

/// Random anisotropic Gaussians in front of [`suite_camera`].
pub fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let mut g = Gaussian3D::new(
                Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.5..4.0)),
                rng.random_range(0.08..0.25),
                rng.random_range(0.2..0.8),
                [rng.random(), rng.random(), rng.random()],
            );
            g.log_scale += Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
            g.rotation = [
                rng.random_range(0.5..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            g
        })
        .collect()
}

fn random_rgb(rng: &mut ChaCha8Rng, s: usize, lo: f64, hi: f64) -> ImageRgb {
    ImageRgb::from_fn(s, s, |_, _| {
        [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
    })
}

fn central<F: FnMut(f64) -> Result<f64>>(x: f64, h: f64, mut f: F) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn check_enhancer(rng: &mut ChaCha8Rng, cfg: &SuiteConfig, acc: &mut Acc) -> Result<()> {
    let s = cfg.image_size;
    let img = random_rgb(rng, s, 0.0, 0.3);
    // Illumination above every pixel keeps R off its clamp, where finite
    // differences are meaningless.
    let mut p = EnhancerParams::from_image(&img, 4, 3, 0.45);
    for v in &mut p.grid {
        *v = rng.random_range(0.35f64..0.7).ln();
    }
    // Random linear functional of I_enh on top of the enhancer loss.
    let probe = random_rgb(rng, s, -1.0, 1.0);
    let weights = EnhancementWeights::default();
    let eval = |q: &EnhancerParams| -> Result<f64> {
        let tape = EnhanceTape::forward(&img, q)?;
        let lin: f64 = tape.enhanced.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>();
        Ok(enhancement_loss(&img, &tape, q, &weights).0.total + lin / probe.data.len() as f64)
    };
    let tape = EnhanceTape::forward(&img, &p)?;
    let (_, mut grad) = enhancement_loss(&img, &tape, &p, &weights);
    let scaled = ImageRgb {
        data: probe.data.iter().map(|v| v / probe.data.len() as f64).collect(),
        ..probe.clone()
    };
    grad.add_scaled(&tape.backward(&img, &p, Some(&scaled), None, None), 1.0);
    for k in 0..p.grid.len() {
        let fd = central(p.grid[k], cfg.step, |x| {
            let mut q = p.clone();
            q.grid[k] = x;
            eval(&q)
        })?;
        acc.add("enhancer", ParamClass::EnhancerGrid.name(), grad.grid[k], fd);
    }
    let fd = central(p.gamma_raw, cfg.step, |x| {
        let mut q = p.clone();
        q.gamma_raw = x;
        eval(&q)
    })?;
    acc.add("enhancer", ParamClass::EnhancerGamma.name(), grad.gamma_raw, fd);
    Ok(())
}

/// Checks `loss(a, b)` against its analytic gradients at sampled samples of
/// both images.
fn check_image_pair<F>(
    rng: &mut ChaCha8Rng,
    cfg: &SuiteConfig,
    a: &ImageRgb,
    b: &ImageRgb,
    grads: (&ImageRgb, &ImageRgb),
    names: (&str, &str),
    component: &'static str,
    acc: &mut Acc,
    loss: F,
) -> Result<()>
where
    F: Fn(&ImageRgb, &ImageRgb) -> Result<f64>,
{
    let n = a.data.len();
    for _ in 0..cfg.pixel_samples {
        let k = rng.random_range(0..n);
        let fd = central(a.data[k], cfg.step, |x| {
            let mut p = a.clone();
            p.data[k] = x;
            loss(&p, b)
        })?;
        acc.add(component, names.0, grads.0.data[k], fd);
        let fd = central(b.data[k], cfg.step, |x| {
            let mut p = b.clone();
            p.data[k] = x;
            loss(a, &p)
        })?;
        acc.add(component, names.1, grads.1.data[k], fd);
    }
    Ok(())
}

fn check_thermal(rng: &mut ChaCha8Rng, cfg: &SuiteConfig, acc: &mut Acc) -> Result<()> {
    let s = cfg.image_size;
    let enh = random_rgb(rng, s, 0.05, 0.95);
    let ren = random_rgb(rng, s, 0.05, 0.95);
    let therm = ImageGray::from_fn(s, s, |_, _| rng.random_range(0.0..1.0));
    let l = thermal_loss(&enh, &ren, &therm, DEFAULT_GAMMA)?;
    check_image_pair(
        rng,
        cfg,
        &enh,
        &ren,
        (&l.d_enhanced, &l.d_rendered),
        ("d_enhanced", "d_rendered"),
        "thermal_loss",
        acc,
        |e, r| Ok(thermal_loss(e, r, &therm, DEFAULT_GAMMA)?.total),
    )
}

fn check_gs(rng: &mut ChaCha8Rng, cfg: &SuiteConfig, acc: &mut Acc) -> Result<()> {
    let s = cfg.image_size;
    let ren = random_rgb(rng, s, 0.0, 1.0);
    let gt = random_rgb(rng, s, 0.0, 1.0);
    let therm = ImageGray::from_fn(s, s, |_, _| rng.random_range(0.0..1.0));
    let w = GsLossWeights::default();
    let l = gs_loss(&ren, &gt, &therm, &w)?;
    check_image_pair(
        rng,
        cfg,
        &ren,
        &gt,
        (&l.d_rendered, &l.d_target),
        ("d_rendered", "d_target"),
        "gs_loss",
        acc,
        |r, t| Ok(gs_loss(r, t, &therm, &w)?.total),
    )
}

/// Runs every check for every seed.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::InvalidStep(cfg.step));
    }
    if cfg.seeds.is_empty() || cfg.num_gaussians == 0 || cfg.image_size < crate::metrics::SSIM_WINDOW {
        return Err(Error::InvalidConfig(
            "gradcheck needs seeds, Gaussians and images of at least 11 pixels".into(),
        ));
    }
    let cam = suite_camera(cfg.image_size);
    let mut renderer = Vec::new();
    let mut acc = Acc::default();
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_gaussians(&mut rng, cfg.num_gaussians);
        let target = random_rgb(&mut rng, cfg.image_size, 0.0, 1.0);
        renderer.push(gradcheck_with(
            &scene,
            &cam,
            [0.0; 3],
            &LossSpec::L2(target),
            cfg.step,
            cfg.tolerance,
            cfg.corrupt,
        )?);
        check_enhancer(&mut rng, cfg, &mut acc)?;
        check_thermal(&mut rng, cfg, &mut acc)?;
        check_gs(&mut rng, cfg, &mut acc)?;
    }
    let merged = GradcheckReport::merge(&renderer).expect("at least one seed");
    let mut lines: Vec<CheckLine> = merged
        .classes
        .iter()
        .map(|c| CheckLine {
            component: "renderer",
            quantity: c.class.name().to_string(),
            count: c.count,
            skipped: c.skipped,
            max_rel_error: c.max_rel_error,
            passed: c.passed,
        })
        .collect();
    lines.extend(acc.lines.into_iter().map(|(component, quantity, count, max)| CheckLine {
        component,
        quantity,
        count,
        skipped: 0,
        max_rel_error: max,
        passed: max <= cfg.tolerance,
    }));
    let passed = lines.iter().all(|l| l.passed);
    Ok(SuiteReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        lines,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            seeds: vec![0, 1],
            num_gaussians: 4,
            pixel_samples: 16,
            ..Default::default()
        }
    }

    #[test]
    fn passes_and_lists_all_classes() {
        let r = run_suite(&small()).unwrap();
        assert!(r.passed, "{:#?}", r.lines);
        for class in ParamClass::GAUSSIAN.iter().chain(&[ParamClass::EnhancerGrid, ParamClass::EnhancerGamma]) {
            assert!(r.lines.iter().any(|l| l.quantity == class.name()), "{}", class.name());
        }
        for c in ["thermal_loss", "gs_loss"] {
            assert_eq!(r.lines.iter().filter(|l| l.component == c).count(), 2);
        }
    }

    #[test]
    fn corruption_fails_only_that_class() {
        let cfg = SuiteConfig {
            corrupt: Some(ParamClass::Color),
            ..small()
        };
        let r = run_suite(&cfg).unwrap();
        assert!(!r.passed);
        let failed: Vec<_> = r.lines.iter().filter(|l| !l.passed).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].quantity, ParamClass::Color.name());
    }

    #[test]
    fn cutoff_crossings_are_skipped_not_failed() {
        // In these scenes a position step moves a 3σ ellipse edge over a
        // pixel center.
        let cfg = SuiteConfig {
            seeds: vec![15, 19, 30],
            pixel_samples: 4,
            ..Default::default()
        };
        let r = run_suite(&cfg).unwrap();
        assert!(r.passed, "{:#?}", r.lines);
        let position = r.lines.iter().find(|l| l.quantity == ParamClass::Position.name()).unwrap();
        assert!(position.skipped > 0);
    }

    #[test]
    fn invalid_step() {
        let cfg = SuiteConfig { step: -1.0, ..small() };
        assert!(matches!(run_suite(&cfg), Err(Error::InvalidStep(_))));
    }
}
