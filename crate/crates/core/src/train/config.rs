//! Run configuration, stored as flat JSON. Every field has a default, so an
//! empty object `{}` is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticSceneSpec;
use crate::error::{Error, Result};
use crate::optim::{LrMultipliers, LrSchedule};
use crate::retinex::EnhancementWeights;
use crate::schedule::{GsLossWeights, LossWeights, ScheduleConfig, ScheduleMode, DEFAULT_TRANSITION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSampling {
    #[default]
    RoundRobin,
    /// Uniform over training views, drawn from the seeded run RNG.
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    #[default]
    WarmRestart,
    Monotone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene directory. When absent the scene is generated from `generator`
    /// (or the built-in desk scene).
    pub scene: Option<PathBuf>,
    pub generator: Option<SyntheticSceneSpec>,
    pub iters: usize,
    pub t_transition: usize,
    pub lambda_initial: [f64; 3],
    pub lambda_final: [f64; 3],
    pub breakpoints: [f64; 3],
    pub schedule_mode: ScheduleMode,
    pub fine_tune: Option<[f64; 3]>,
    pub thermal_gamma: f64,
    pub gs_l1: f64,
    pub gs_ssim: f64,
    pub gs_edge: f64,
    pub gs_consistency: f64,
    pub enh_reconstruction: f64,
    pub enh_smoothness: f64,
    pub enh_exposure: f64,
    pub exposure_target: f64,
    /// Start each enhancer with the exponent that puts its mean luma on
    /// `exposure_target` instead of the fixed default exponent.
    pub calibrate_exposure: bool,
    pub grid_w: usize,
    pub grid_h: usize,
    pub base_lr: f64,
    pub lr_mode: LrMode,
    /// Restart period of the warm-restart cosine.
    pub lr_period: usize,
    pub lr_position: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_enhancer: f64,
    pub prune_threshold: f64,
    pub prune_interval: usize,
    pub knn: usize,
    /// Gaussians for the random fallback when the scene has no point cloud.
    pub init_points: usize,
    pub background: [f64; 3],
    pub seed: u64,
    pub view_sampling: ViewSampling,
    /// Training resolution `[width, height]`; images are resampled.
    pub resolution: Option<[usize; 2]>,
    pub holdout_every: usize,
    pub disable_cyclic: bool,
    pub disable_thermal: bool,
    pub disable_enhancer: bool,
    /// Enhancers fitted on their own loss first, then frozen; the splatting
    /// branch trains on the fixed enhanced images without thermal terms.
    pub retinex_preprocess: bool,
    pub preprocess_iters: usize,
    pub preprocess_lr: f64,
    /// Lets the reconstruction loss reach the enhancer through the blended
    /// target (`∂GT/∂I_enh = α`).
    pub couple_gt_gradient: bool,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gs = GsLossWeights::default();
        let enh = EnhancementWeights::default();
        let lr = LrMultipliers::default();
        let sched = ScheduleConfig::new(1);
        Self {
            scene: None,
            generator: None,
            iters: 2000,
            t_transition: DEFAULT_TRANSITION,
            lambda_initial: sched.initial,
            lambda_final: sched.final_weights,
            breakpoints: sched.breakpoints,
            schedule_mode: ScheduleMode::FourStage,
            fine_tune: None,
            thermal_gamma: crate::thermal::DEFAULT_GAMMA,
            gs_l1: gs.l1,
            gs_ssim: gs.ssim,
            gs_edge: gs.edge,
            gs_consistency: gs.consistency,
            enh_reconstruction: enh.reconstruction,
            enh_smoothness: enh.smoothness,
            enh_exposure: enh.exposure,
            exposure_target: DEFAULT_EXPOSURE_TARGET,
            calibrate_exposure: true,
            grid_w: 16,
            grid_h: 12,
            base_lr: 1e-3,
            lr_mode: LrMode::WarmRestart,
            lr_period: 5000,
            lr_position: lr.position,
            lr_log_scale: lr.log_scale,
            lr_rotation: lr.rotation,
            lr_opacity: lr.opacity,
            lr_color: lr.color,
            lr_enhancer: lr.enhancer,
            prune_threshold: crate::optim::DEFAULT_PRUNE_THRESHOLD,
            prune_interval: crate::optim::DEFAULT_PRUNE_INTERVAL,
            knn: crate::dataset::DEFAULT_KNN,
            init_points: 1000,
            background: [0.0; 3],
            seed: 0,
            view_sampling: ViewSampling::RoundRobin,
            resolution: None,
            holdout_every: crate::dataset::HOLDOUT_EVERY,
            disable_cyclic: false,
            disable_thermal: false,
            disable_enhancer: false,
            retinex_preprocess: false,
            preprocess_iters: 300,
            preprocess_lr: 1e-2,
            couple_gt_gradient: false,
            checkpoint_interval: 0,
        }
    }
}

/// Target mean luma of enhanced images: photographic middle gray.
pub const DEFAULT_EXPOSURE_TARGET: f64 = 0.18;

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::dataset::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            initial: self.lambda_initial,
            final_weights: self.lambda_final,
            total_iters: self.iters,
            breakpoints: self.breakpoints,
            mode: self.schedule_mode,
            fine_tune: self.fine_tune,
        }
    }

    pub fn gs_weights(&self) -> GsLossWeights {
        let thermal_off = self.disable_thermal || self.retinex_preprocess;
        GsLossWeights {
            l1: self.gs_l1,
            ssim: self.gs_ssim,
            edge: self.gs_edge,
            consistency: if thermal_off { 0.0 } else { self.gs_consistency },
        }
    }

    pub fn enhancement_weights(&self) -> EnhancementWeights {
        EnhancementWeights {
            reconstruction: self.enh_reconstruction,
            smoothness: self.enh_smoothness,
            exposure: self.enh_exposure,
        }
    }

    pub fn lr_multipliers(&self) -> LrMultipliers {
        let frozen = self.disable_enhancer || self.retinex_preprocess;
        LrMultipliers {
            position: self.lr_position,
            log_scale: self.lr_log_scale,
            rotation: self.lr_rotation,
            opacity: self.lr_opacity,
            color: self.lr_color,
            enhancer: if frozen { 0.0 } else { self.lr_enhancer },
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.lr_mode {
            LrMode::WarmRestart => LrSchedule::WarmRestart { period: self.lr_period },
            LrMode::Monotone => LrSchedule::Monotone { total: self.iters },
        }
    }

    /// Loss weights actually used at iteration `t`, after ablation flags.
    pub fn weights_at(&self, t: usize) -> Result<LossWeights> {
        if self.retinex_preprocess {
            return LossWeights::from_raw([0.0, 1.0, 0.0]);
        }
        let w = crate::schedule::lambda_schedule(t, &self.schedule())?;
        Ok(if self.disable_thermal { w.without_thermal() } else { w })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iters == 0 {
            return bad("iters must be positive".into());
        }
        if self.t_transition == 0 {
            return bad("t_transition must be positive".into());
        }
        self.schedule().validate()?;
        if !(0.0..=1.0).contains(&self.thermal_gamma) {
            return bad(format!("thermal_gamma {} outside [0, 1]", self.thermal_gamma));
        }
        let nonneg = [
            ("gs_l1", self.gs_l1),
            ("gs_ssim", self.gs_ssim),
            ("gs_edge", self.gs_edge),
            ("gs_consistency", self.gs_consistency),
            ("enh_reconstruction", self.enh_reconstruction),
            ("enh_smoothness", self.enh_smoothness),
            ("enh_exposure", self.enh_exposure),
            ("lr_position", self.lr_position),
            ("lr_log_scale", self.lr_log_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_opacity", self.lr_opacity),
            ("lr_color", self.lr_color),
            ("lr_enhancer", self.lr_enhancer),
            ("prune_threshold", self.prune_threshold),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.exposure_target > 0.0 && self.exposure_target < 1.0) {
            return bad(format!("exposure_target {} outside (0, 1)", self.exposure_target));
        }
        if self.grid_w == 0 || self.grid_h == 0 {
            return bad("enhancer grid must be non-empty".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.preprocess_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_period == 0 || self.prune_interval == 0 || self.holdout_every < 2 {
            return bad("lr_period and prune_interval must be positive, holdout_every at least 2".into());
        }
        if self.knn == 0 {
            return bad("knn must be positive".into());
        }
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("background must lie in [0, 1]".into());
        }
        if let Some([w, h]) = self.resolution {
            if w == 0 || h == 0 {
                return bad("resolution must be positive".into());
            }
        }
        if let Some(g) = &self.generator {
            g.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_and_unknown_field() {
        let mut c = RunConfig::default();
        c.iters = 17;
        c.resolution = Some([80, 60]);
        c.disable_thermal = true;
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json_str(&text).unwrap(), c);
        assert!(RunConfig::from_json_str(r#"{"itres": 5}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"iters": 0}"#).is_err());
    }

    #[test]
    fn ablation_weights() {
        let mut c = RunConfig::default();
        c.disable_thermal = true;
        for t in [0, 500, 1000, 1999] {
            let w = c.weights_at(t).unwrap();
            assert_eq!(w.lambda_therm, 0.0);
            w.validate().unwrap();
        }
        assert_eq!(c.gs_weights().consistency, 0.0);
        c.disable_thermal = false;
        c.retinex_preprocess = true;
        assert_eq!(c.weights_at(3).unwrap().as_array(), [0.0, 1.0, 0.0]);
        assert_eq!(c.lr_multipliers().enhancer, 0.0);
    }
}
