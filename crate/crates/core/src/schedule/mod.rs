//! Evolving supervision targets, loss-weight scheduling and loss assembly.
//!
//! The per-view target starts at the low-light input and is blended towards
//! the current enhanced image with a factor that ramps linearly to 1 over
//! `T_transition` iterations. The three loss weights follow a four-stage
//! piecewise-linear schedule and are always normalized to sum to 1 with
//! `λ_gs ≥ 0.1`.

mod gs_loss;

pub use gs_loss::{gs_loss, GsLoss, GsLossWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ImageRgb;

pub const DEFAULT_TRANSITION: usize = 8000;
pub const MIN_LAMBDA_GS: f64 = 0.1;

/// `min(1, t / T_transition)`.
pub fn alpha_blend(t: usize, t_transition: usize) -> Result<f64> {
    if t_transition == 0 {
        return Err(Error::InvalidConfig("T_transition must be positive".into()));
    }
    Ok((t as f64 / t_transition as f64).min(1.0))
}

/// Evolving target of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionState {
    pub gt_current: ImageRgb,
    pub iteration: usize,
    pub t_transition: usize,
}

impl SupervisionState {
    /// Target at `t = 0`: the low-light input itself.
    pub fn new(i_low: &ImageRgb, t_transition: usize) -> Self {
        Self {
            gt_current: i_low.clone(),
            iteration: 0,
            t_transition,
        }
    }

    /// Blends in `i_enh` with `α = alpha_blend(t, T_transition)`; returns `α`.
    pub fn update_gt(&mut self, i_enh: &ImageRgb, t: usize) -> Result<f64> {
        let alpha = alpha_blend(t, self.t_transition)?;
        self.blend(i_enh, alpha, t)?;
        Ok(alpha)
    }

    /// `GT ← (1−α)·GT + α·I_enh` with an explicit `α`.
    pub fn blend(&mut self, i_enh: &ImageRgb, alpha: f64, t: usize) -> Result<()> {
        i_enh.check_same_dims(self.gt_current.dims(), "update_gt")?;
        if !i_enh.is_finite() {
            return Err(Error::NonFiniteInput { what: "enhanced image" });
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("blend factor {alpha} outside [0, 1]")));
        }
        // The endpoints are exact: α = 0 keeps the target, α = 1 copies.
        if alpha == 1.0 {
            self.gt_current.data.copy_from_slice(&i_enh.data);
        } else if alpha > 0.0 {
            for (g, e) in self.gt_current.data.iter_mut().zip(&i_enh.data) {
                *g = (1.0 - alpha) * *g + alpha * e;
            }
        }
        self.iteration = t;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_enh: f64,
    pub lambda_gs: f64,
    pub lambda_therm: f64,
}

impl LossWeights {
    /// Normalizes a raw triple `(enh, gs, therm)` to sum 1, then lifts
    /// `λ_gs` to 0.1 if needed, rescaling the other two to share 0.9.
    pub fn from_raw(raw: [f64; 3]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights {raw:?} must be finite and non-negative")));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidConfig("loss weights sum to zero".into()));
        }
        Ok(Self::project([raw[0] / sum, raw[1] / sum, raw[2] / sum]))
    }

    fn project(n: [f64; 3]) -> Self {
        let [mut e, mut g, mut t] = n;
        if g < MIN_LAMBDA_GS {
            let rest = e + t;
            g = MIN_LAMBDA_GS;
            e *= (1.0 - g) / rest;
            t *= (1.0 - g) / rest;
        }
        // Put the last bit of rounding into λ_gs so the sum is exact to 1 ulp.
        g = 1.0 - e - t;
        Self {
            lambda_enh: e,
            lambda_gs: g,
            lambda_therm: t,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda_enh, self.lambda_gs, self.lambda_therm]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        let ok = a.iter().all(|v| v.is_finite() && *v >= 0.0)
            && (a.iter().sum::<f64>() - 1.0).abs() <= 1e-12
            && self.lambda_gs >= MIN_LAMBDA_GS - 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights {a:?} violate normalization")))
        }
    }

    /// Zeroes `λ_therm` and renormalizes.
    pub fn without_thermal(&self) -> Self {
        Self::from_raw([self.lambda_enh, self.lambda_gs, 0.0]).expect("λ_gs ≥ 0.1 keeps the sum positive")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Hold, ramp, hold, fine-tune at 20% / 40% / 70% of training.
    FourStage,
    /// Enhancer weight stepped 0.3 → 0.2 → 0.1 at 30% / 70%; the other two
    /// raw weights are taken from the final triple.
    Stepped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Raw `(enh, gs, therm)` before normalization.
    pub initial: [f64; 3],
    pub final_weights: [f64; 3],
    pub total_iters: usize,
    pub breakpoints: [f64; 3],
    pub mode: ScheduleMode,
    /// Stage-4 override: when set, weights ramp from the final triple to
    /// this one over the last stage instead of being held.
    pub fine_tune: Option<[f64; 3]>,
}

impl ScheduleConfig {
    pub fn new(total_iters: usize) -> Self {
        Self {
            initial: [0.1, 0.9, 0.1],
            final_weights: [0.1, 0.9, 0.2],
            total_iters,
            breakpoints: [0.2, 0.4, 0.7],
            mode: ScheduleMode::FourStage,
            fine_tune: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::InvalidConfig("total iterations must be positive".into()));
        }
        let [b1, b2, b3] = self.breakpoints;
        if !(0.0 < b1 && b1 < b2 && b2 < b3 && b3 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "breakpoints {:?} must be strictly increasing in (0, 1)",
                self.breakpoints
            )));
        }
        LossWeights::from_raw(self.initial)?;
        LossWeights::from_raw(self.final_weights)?;
        if let Some(f) = self.fine_tune {
            LossWeights::from_raw(f)?;
        }
        Ok(())
    }
}

fn lerp(a: &LossWeights, b: &LossWeights, s: f64) -> LossWeights {
    let (x, y) = (a.as_array(), b.as_array());
    LossWeights::project([
        x[0] + s * (y[0] - x[0]),
        x[1] + s * (y[1] - x[1]),
        x[2] + s * (y[2] - x[2]),
    ])
}

/// Loss weights at iteration `t`. Past `T` the last stage is held.
pub fn lambda_schedule(t: usize, cfg: &ScheduleConfig) -> Result<LossWeights> {
    lambda_at_progress(t as f64 / cfg.total_iters.max(1) as f64, cfg)
}

/// Loss weights at training progress `r = t / T`.
pub fn lambda_at_progress(r: f64, cfg: &ScheduleConfig) -> Result<LossWeights> {
    cfg.validate()?;
    let w0 = LossWeights::from_raw(cfg.initial)?;
    let wf = LossWeights::from_raw(cfg.final_weights)?;
    match cfg.mode {
        ScheduleMode::FourStage => {
            let [b1, b2, b3] = cfg.breakpoints;
            Ok(if r < b1 {
                w0
            } else if r < b2 {
                lerp(&w0, &wf, (r - b1) / (b2 - b1))
            } else if r < b3 {
                wf
            } else {
                match cfg.fine_tune {
                    Some(ft) => lerp(&wf, &LossWeights::from_raw(ft)?, ((r - b3) / (1.0 - b3)).min(1.0)),
                    None => wf,
                }
            })
        }
        ScheduleMode::Stepped => {
            let e = if r < 0.3 {
                0.3
            } else if r < 0.7 {
                0.2
            } else {
                0.1
            };
            LossWeights::from_raw([e, cfg.final_weights[1], cfg.final_weights[2]])
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub enh: f64,
    pub gs: f64,
    pub therm: f64,
}

/// `λ_enh·L_enh + λ_gs·L_gs + λ_therm·L_therm`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_enh", parts.enh), ("L_gs", parts.gs), ("L_therm", parts.therm)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm(name));
        }
    }
    Ok(w.lambda_enh * parts.enh + w.lambda_gs * parts.gs + w.lambda_therm * parts.therm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_blend(0, 8000).unwrap(), 0.0);
        assert_eq!(alpha_blend(4000, 8000).unwrap(), 0.5);
        assert_eq!(alpha_blend(8000, 8000).unwrap(), 1.0);
        assert_eq!(alpha_blend(30000, 8000).unwrap(), 1.0);
        assert!(alpha_blend(5, 0).is_err());
    }

    #[test]
    fn update_examples() {
        let low = ImageRgb::filled(2, 2, [0.2; 3]);
        let enh = ImageRgb::filled(2, 2, [0.6; 3]);
        let mut s = SupervisionState::new(&low, 8000);
        assert_eq!(s.gt_current, low);
        s.update_gt(&enh, 0).unwrap();
        assert_eq!(s.gt_current, low);
        s.update_gt(&enh, 2000).unwrap();
        assert!(s.gt_current.data.iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert_eq!(s.iteration, 2000);
        s.update_gt(&enh, 8000).unwrap();
        assert_eq!(s.gt_current, enh);
        assert!(s.update_gt(&ImageRgb::new(3, 2), 1).is_err());
        let mut bad = enh.clone();
        bad.data[0] = f64::NAN;
        assert!(s.update_gt(&bad, 1).is_err());
    }

    #[test]
    fn fixed_point_after_transition() {
        let low = ImageRgb::filled(2, 1, [0.1; 3]);
        let enh = ImageRgb::from_fn(2, 1, |x, _| [0.3 + 0.1 * x as f64, 0.5, 0.7]);
        let mut s = SupervisionState::new(&low, 10);
        s.update_gt(&enh, 10).unwrap();
        assert_eq!(s.gt_current, enh);
        for t in 11..20 {
            s.update_gt(&enh, t).unwrap();
            assert_eq!(s.gt_current, enh);
        }
    }

    #[test]
    fn normalized_triple() {
        let w = LossWeights::from_raw([0.1, 0.9, 0.2]).unwrap();
        assert!((w.lambda_enh - 0.083).abs() < 5e-4);
        assert!((w.lambda_gs - 0.750).abs() < 5e-4);
        assert!((w.lambda_therm - 0.167).abs() < 5e-4);
        w.validate().unwrap();
        let p = LossWeights::from_raw([1.0, 0.0, 1.0]).unwrap();
        assert!((p.lambda_gs - 0.1).abs() < 1e-15);
        assert!((p.lambda_enh - 0.45).abs() < 1e-15);
        p.validate().unwrap();
        assert!(LossWeights::from_raw([0.0, 0.0, 0.0]).is_err());
        assert!(LossWeights::from_raw([-1.0, 1.0, 1.0]).is_err());
        let nt = w.without_thermal();
        assert_eq!(nt.lambda_therm, 0.0);
        nt.validate().unwrap();
    }

    #[test]
    fn schedule_examples() {
        let cfg = ScheduleConfig::new(1000);
        let w0 = LossWeights::from_raw(cfg.initial).unwrap();
        let wf = LossWeights::from_raw(cfg.final_weights).unwrap();
        assert_eq!(lambda_schedule(100, &cfg).unwrap(), w0);
        let mid = lambda_schedule(300, &cfg).unwrap();
        for k in 0..3 {
            assert!((mid.as_array()[k] - 0.5 * (w0.as_array()[k] + wf.as_array()[k])).abs() < 1e-15);
        }
        assert_eq!(lambda_schedule(500, &cfg).unwrap(), wf);
        assert_eq!(lambda_schedule(900, &cfg).unwrap(), wf);
        assert_eq!(lambda_schedule(5000, &cfg).unwrap(), wf);
        let mut bad = cfg.clone();
        bad.breakpoints = [0.4, 0.2, 0.7];
        assert!(lambda_schedule(1, &bad).is_err());
    }

    #[test]
    fn schedule_continuous_at_breakpoints() {
        let mut cfg = ScheduleConfig::new(1000);
        cfg.fine_tune = Some([0.05, 0.9, 0.3]);
        for b in [0.2f64, 0.4, 0.7] {
            let l = lambda_at_progress(b - 1e-15, &cfg).unwrap().as_array();
            let r = lambda_at_progress(b, &cfg).unwrap().as_array();
            for k in 0..3 {
                assert!((l[k] - r[k]).abs() <= 1e-12, "{b}: {l:?} vs {r:?}");
            }
        }
    }

    #[test]
    fn stepped_schedule() {
        let mut cfg = ScheduleConfig::new(100);
        cfg.mode = ScheduleMode::Stepped;
        let raw = |e: f64| LossWeights::from_raw([e, 0.9, 0.2]).unwrap();
        assert_eq!(lambda_schedule(10, &cfg).unwrap(), raw(0.3));
        assert_eq!(lambda_schedule(50, &cfg).unwrap(), raw(0.2));
        assert_eq!(lambda_schedule(90, &cfg).unwrap(), raw(0.1));
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::from_raw([0.1, 0.9, 0.2]).unwrap();
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap(), 0.0);
        let ones = LossParts { enh: 1.0, gs: 1.0, therm: 1.0 };
        assert!((total_loss(&ones, &w).unwrap() - 1.0).abs() < 1e-15);
        let p = LossParts { enh: 0.2, gs: 0.5, therm: 0.1 };
        let oracle = 0.2 / 12.0 + 0.5 * 0.75 + 0.1 / 6.0;
        let v = total_loss(&p, &w).unwrap();
        assert!((v - oracle).abs() < 1e-15);
        // Three-decimal weights give the same value to 1e-4.
        assert!((v - 0.40836).abs() < 1e-4);
        let bad = LossParts { therm: f64::NAN, ..p };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFiniteTerm("L_therm"))));
    }

    proptest! {
        #[test]
        fn alpha_monotone(t in 0usize..20_000, dt in 0usize..5000, tt in 1usize..10_000) {
            let a = alpha_blend(t, tt).unwrap();
            let b = alpha_blend(t + dt, tt).unwrap();
            prop_assert!(a <= b && (0.0..=1.0).contains(&a));
        }

        #[test]
        fn blend_is_convex(prev in 0.0f64..1.0, enh in 0.0f64..1.0, t in 0usize..200) {
            let mut s = SupervisionState::new(&ImageRgb::filled(1, 1, [prev; 3]), 100);
            s.update_gt(&ImageRgb::filled(1, 1, [enh; 3]), t).unwrap();
            let g = s.gt_current.data[0];
            prop_assert!(g >= prev.min(enh) && g <= prev.max(enh));
        }

        #[test]
        fn weights_valid_everywhere(
            t in 0usize..2000,
            a in proptest::array::uniform3(0.0f64..1.0),
            b in proptest::array::uniform3(0.0f64..1.0),
        ) {
            let mut cfg = ScheduleConfig::new(2000);
            cfg.initial = [a[0], a[1] + 0.01, a[2]];
            cfg.final_weights = [b[0], b[1] + 0.01, b[2]];
            lambda_schedule(t, &cfg).unwrap().validate().unwrap();
        }

        #[test]
        fn total_is_homogeneous(c in 0.0f64..10.0, e in 0.0f64..1.0, g in 0.0f64..1.0, th in 0.0f64..1.0) {
            let w = LossWeights::from_raw([0.1, 0.9, 0.2]).unwrap();
            let base = LossParts { enh: e, gs: g, therm: th };
            let scaled = LossParts { therm: c * th, ..base };
            let d = total_loss(&scaled, &w).unwrap() - total_loss(&base, &w).unwrap();
            prop_assert!((d - w.lambda_therm * (c - 1.0) * th).abs() < 1e-12);
        }
    }
}
