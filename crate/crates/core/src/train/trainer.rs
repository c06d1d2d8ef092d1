use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    generate_scene, init_gaussians, load_scene, random_init, resize_frame, split_views, Checkpoint, PointCloud,
    SyntheticSceneSpec,
};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::optim::{adam_step, prune, AdamState, LrMultipliers, LrSchedule};
use crate::params::{GradBundle, ParamBundle};
use crate::render::render;
use crate::retinex::{enhance, enhancement_loss, EnhanceTape, EnhancementWeights, EnhancerParams};
use crate::scene::{Gaussian3D, ImageRgb, MultiViewFrame};
use crate::schedule::{alpha_blend, gs_loss, total_loss, GsLossWeights, LossParts, SupervisionState};
use crate::thermal::thermal_loss;

use super::config::{RunConfig, ViewSampling};
use super::log::LogRow;

/// Frames and optional point cloud of one scene.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub frames: Vec<MultiViewFrame>,
    pub points: Option<PointCloud>,
}

impl SceneData {
    pub fn generate(name: &str, spec: &SyntheticSceneSpec) -> Result<Self> {
        let s = generate_scene(spec)?;
        Ok(Self {
            name: name.to_string(),
            frames: s.frames,
            points: Some(s.points),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let s = load_scene(dir)?;
        let name = dir
            .file_name()
            .map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned());
        Ok(Self {
            name,
            frames: s.frames,
            points: s.points,
        })
    }

    /// The scene directory named in `cfg`, else its generator spec, else
    /// the desk scene.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match (&cfg.scene, &cfg.generator) {
            (Some(dir), _) => Self::load(dir),
            (None, Some(spec)) => Self::generate("generated", spec),
            (None, None) => Self::generate("desk", &SyntheticSceneSpec::desk()),
        }
    }
}

/// Standard deviation across images of their mean luma.
pub fn mean_luma_std(images: &[&ImageRgb]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let m: Vec<f64> = images.iter().map(|i| i.mean_luma()).collect();
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    (m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.len() as f64).sqrt()
}

/// Joint optimizer of the Gaussians and the per-view enhancers.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    scene_name: String,
    frames: Vec<MultiViewFrame>,
    train_views: Vec<usize>,
    holdout_views: Vec<usize>,
    gaussians: Vec<Gaussian3D>,
    enhancers: Vec<EnhancerParams>,
    supervision: Vec<SupervisionState>,
    adam: AdamState,
    t: usize,
    rng: ChaCha8Rng,
    gs_weights: GsLossWeights,
    enh_weights: EnhancementWeights,
    lr_mult: LrMultipliers,
    lr_schedule: LrSchedule,
}

struct Prepared {
    frames: Vec<MultiViewFrame>,
    train: Vec<usize>,
    holdout: Vec<usize>,
}

fn prepare(config: &RunConfig, scene: &SceneData) -> Result<Prepared> {
    config.validate()?;
    if scene.frames.len() < 2 {
        return Err(Error::InvalidConfig("a scene needs at least 2 views".into()));
    }
    let frames: Vec<MultiViewFrame> = match config.resolution {
        Some([w, h]) => scene.frames.iter().map(|f| resize_frame(f, w, h)).collect(),
        None => scene.frames.clone(),
    };
    for (i, f) in frames.iter().enumerate() {
        f.validate().map_err(|e| Error::View {
            view: i,
            message: e.to_string(),
        })?;
    }
    let (train, holdout) = split_views(frames.len(), config.holdout_every);
    if train.is_empty() {
        return Err(Error::InvalidConfig("no training views".into()));
    }
    Ok(Prepared { frames, train, holdout })
}

impl Trainer {
    pub fn new(config: RunConfig, scene: &SceneData) -> Result<Self> {
        let p = prepare(&config, scene)?;
        let gaussians = match &scene.points {
            Some(points) => init_gaussians(points, config.knn)?,
            None => {
                let cams: Vec<_> = p.frames.iter().map(|f| f.camera.clone()).collect();
                random_init(&cams, config.init_points, config.knn, config.seed)?
            }
        };
        let (gw, gh, e) = (config.grid_w, config.grid_h, config.exposure_target);
        let enhancers: Vec<EnhancerParams> = p
            .frames
            .iter()
            .map(|f| {
                if config.disable_enhancer {
                    Ok(EnhancerParams::identity(gw, gh, e))
                } else if config.calibrate_exposure {
                    EnhancerParams::calibrated(&f.rgb_low, gw, gh, e)
                } else {
                    Ok(EnhancerParams::from_image(&f.rgb_low, gw, gh, e))
                }
            })
            .collect::<Result<_>>()?;
        let supervision = p
            .frames
            .iter()
            .map(|f| SupervisionState::new(&f.rgb_low, config.t_transition))
            .collect();
        let layout_len = gaussians.len() * Gaussian3D::NUM_PARAMS + enhancers.iter().map(|e| e.num_trainable()).sum::<usize>();
        let mut trainer = Self {
            gs_weights: config.gs_weights(),
            enh_weights: config.enhancement_weights(),
            lr_mult: config.lr_multipliers(),
            lr_schedule: config.lr_schedule(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            scene_name: scene.name.clone(),
            frames: p.frames,
            train_views: p.train,
            holdout_views: p.holdout,
            gaussians,
            enhancers,
            supervision,
            adam: AdamState::new(layout_len),
            t: 0,
            config,
        };
        if trainer.config.retinex_preprocess && !trainer.config.disable_enhancer {
            trainer.prefit_enhancers()?;
        }
        Ok(trainer)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(config: RunConfig, scene: &SceneData, ckpt: &Checkpoint) -> Result<Self> {
        let p = prepare(&config, scene)?;
        let n = p.frames.len();
        if ckpt.enhancers.len() != n || ckpt.supervision.len() != n {
            return Err(Error::CheckpointCorrupt(format!(
                "checkpoint has {} views, scene has {n}",
                ckpt.enhancers.len()
            )));
        }
        for (i, (s, f)) in ckpt.supervision.iter().zip(&p.frames).enumerate() {
            if s.gt_current.dims() != f.rgb_low.dims() {
                return Err(Error::View {
                    view: i,
                    message: "checkpoint target size differs from the scene".into(),
                });
            }
        }
        if ckpt.rng_seed != config.seed {
            log::warn!("checkpoint RNG seed {} differs from config seed {}", ckpt.rng_seed, config.seed);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        let trainer = Self {
            gs_weights: config.gs_weights(),
            enh_weights: config.enhancement_weights(),
            lr_mult: config.lr_multipliers(),
            lr_schedule: config.lr_schedule(),
            rng,
            scene_name: scene.name.clone(),
            frames: p.frames,
            train_views: p.train,
            holdout_views: p.holdout,
            gaussians: ckpt.gaussians.clone(),
            enhancers: ckpt.enhancers.clone(),
            supervision: ckpt.supervision.clone(),
            adam: ckpt.adam.clone(),
            t: ckpt.t,
            config,
        };
        let expected = ParamBundle::gather(&trainer.gaussians, &trainer.enhancers).values.len();
        if trainer.adam.m.len() != expected {
            return Err(Error::CheckpointCorrupt("optimizer state does not match parameters".into()));
        }
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            t: self.t,
            gaussians: self.gaussians.clone(),
            enhancers: self.enhancers.clone(),
            adam: self.adam.clone(),
            supervision: self.supervision.clone(),
            rng_seed: self.config.seed,
            rng_word_pos: self.rng.get_word_pos(),
            config: self.config.to_json(),
        }
    }

    /// Fits each training view's enhancer to its own loss alone and fixes
    /// the targets to the result.
    fn prefit_enhancers(&mut self) -> Result<()> {
        for &v in &self.train_views {
            let i_low = &self.frames[v].rgb_low;
            let params = &mut self.enhancers[v];
            let mut state = AdamState::new(params.num_trainable());
            let bundle_layout = crate::params::ParamLayout::new(&[], std::slice::from_ref(params));
            for _ in 0..self.config.preprocess_iters {
                let tape = EnhanceTape::forward(i_low, params)?;
                let (_, g) = enhancement_loss(i_low, &tape, params, &self.enh_weights);
                let mut grads = GradBundle::zeros(&bundle_layout);
                grads.add_enhancer(0, &g, 1.0);
                let mut bundle = ParamBundle::gather(&[], std::slice::from_ref(params));
                adam_step(&mut bundle, &grads, &mut state, self.config.preprocess_lr, &LrMultipliers::default())?;
                bundle.scatter(&mut [], std::slice::from_mut(params))?;
            }
            let enhanced = enhance(i_low, params)?;
            self.supervision[v].blend(&enhanced, 1.0, 0)?;
        }
        Ok(())
    }

    fn next_view(&mut self) -> usize {
        let n = self.train_views.len();
        match self.config.view_sampling {
            ViewSampling::RoundRobin => self.train_views[self.t % n],
            ViewSampling::Random => self.train_views[self.rng.random_range(0..n)],
        }
    }

    /// One training iteration on one view.
    pub fn step(&mut self) -> Result<LogRow> {
        let t = self.t;
        let v = self.next_view();
        let cfg = &self.config;
        let frame = &self.frames[v];

        let tape = EnhanceTape::forward(&frame.rgb_low, &self.enhancers[v])?;
        let alpha = if cfg.disable_cyclic || cfg.retinex_preprocess {
            0.0
        } else {
            alpha_blend(t, cfg.t_transition)?
        };
        let sup = &mut self.supervision[v];
        let prev = sup.gt_current.data.clone();
        sup.blend(&tape.enhanced, alpha, t)?;
        let gt_violation = prev
            .iter()
            .zip(&tape.enhanced.data)
            .zip(&sup.gt_current.data)
            .map(|((&p, &e), &g)| (p.min(e) - g).max(g - p.max(e)).max(0.0))
            .fold(0.0, f64::max);

        let out = render(&self.gaussians, &frame.camera, cfg.background)?;
        let gs = gs_loss(&out.color, &sup.gt_current, &frame.thermal, &self.gs_weights)?;
        let th = thermal_loss(&tape.enhanced, &out.color, &frame.thermal, cfg.thermal_gamma)?;
        let (le, enh_grad) = enhancement_loss(&frame.rgb_low, &tape, &self.enhancers[v], &self.enh_weights);
        let w = cfg.weights_at(t)?;
        let parts = LossParts {
            enh: le.total,
            gs: gs.total,
            therm: th.total,
        };
        let total = total_loss(&parts, &w).map_err(|e| match e {
            Error::NonFiniteTerm(term) => Error::NonFiniteLoss {
                iteration: t,
                term: term.to_string(),
            },
            other => other,
        })?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                term: "total".into(),
            });
        }

        let mut d_render = gs.d_rendered;
        for (d, e) in d_render.data.iter_mut().zip(&th.d_rendered.data) {
            *d = w.lambda_gs * *d + w.lambda_therm * e;
        }
        let g_gauss = out.backward(&frame.camera, &d_render)?;

        let mut grads = GradBundle::zeros(&ParamBundle::gather(&self.gaussians, &self.enhancers).layout);
        grads.add_gaussians(&g_gauss, 1.0);
        if self.lr_mult.enhancer != 0.0 {
            let mut d_enh = th.d_enhanced;
            let couple = if cfg.couple_gt_gradient { w.lambda_gs * alpha } else { 0.0 };
            for (d, g) in d_enh.data.iter_mut().zip(&gs.d_target.data) {
                *d = w.lambda_therm * *d + couple * g;
            }
            let mut eg = tape.backward(&frame.rgb_low, &self.enhancers[v], Some(&d_enh), None, None);
            eg.add_scaled(&enh_grad, w.lambda_enh);
            grads.add_enhancer(v, &eg, 1.0);
        }

        let lr = self.lr_schedule.lr(t, cfg.base_lr);
        let mut bundle = ParamBundle::gather(&self.gaussians, &self.enhancers);
        adam_step(&mut bundle, &grads, &mut self.adam, lr, &self.lr_mult)?;
        bundle.scatter(&mut self.gaussians, &mut self.enhancers)?;

        if (t + 1) % cfg.prune_interval == 0 {
            let layout = bundle.layout;
            let remap = prune(&mut self.gaussians, cfg.prune_threshold);
            let keep: Vec<bool> = remap.iter().map(Option::is_some).collect();
            self.adam.retain_gaussians(&layout, &keep);
            if self.gaussians.is_empty() {
                return Err(Error::InvalidConfig(format!("every Gaussian was pruned at iteration {t}")));
            }
        }
        self.t += 1;
        Ok(LogRow {
            t,
            view: v,
            alpha,
            weights: w,
            loss_enh: le.total,
            loss_gs: gs.total,
            loss_therm: th.total,
            loss_total: total,
            lr,
            num_gaussians: self.gaussians.len(),
            gt_violation,
        })
    }

    /// Steps until `self.t() == until`, calling `on_row` after each step.
    pub fn run_until<F>(&mut self, until: usize, mut on_row: F) -> Result<Vec<LogRow>>
    where
        F: FnMut(&Trainer, &LogRow) -> Result<()>,
    {
        let mut rows = Vec::with_capacity(until.saturating_sub(self.t));
        while self.t < until {
            let row = self.step()?;
            on_row(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Runs the configured number of iterations.
    pub fn run(&mut self) -> Result<Vec<LogRow>> {
        self.run_until(self.config.iters, |_, _| Ok(()))
    }

    pub fn render_view(&self, v: usize) -> Result<ImageRgb> {
        let f = self.frames.get(v).ok_or(Error::UnknownView(v))?;
        Ok(render(&self.gaussians, &f.camera, self.config.background)?.color)
    }

    /// Current enhanced image of view `v`.
    pub fn enhanced(&self, v: usize) -> Result<ImageRgb> {
        let f = self.frames.get(v).ok_or(Error::UnknownView(v))?;
        enhance(&f.rgb_low, &self.enhancers[v])
    }

    /// Reference used for evaluation: the bright image when the scene has
    /// one, else the view's current target.
    pub fn reference(&self, v: usize) -> Result<&ImageRgb> {
        let f = self.frames.get(v).ok_or(Error::UnknownView(v))?;
        Ok(f.rgb_gt_bright.as_ref().unwrap_or(&self.supervision[v].gt_current))
    }

    pub fn evaluate(&self, views: &[usize]) -> Result<MetricReport> {
        let mut report = MetricReport::default();
        for &v in views {
            report.push(&self.scene_name, v, &self.render_view(v)?, self.reference(v)?)?;
        }
        Ok(report)
    }

    pub fn evaluate_holdout(&self) -> Result<MetricReport> {
        if self.holdout_views.is_empty() {
            return Err(Error::InvalidConfig("scene has no held-out views".into()));
        }
        self.evaluate(&self.holdout_views)
    }

    /// Spread of mean luma across training views, for the enhanced images
    /// and for the raw inputs.
    pub fn luma_spread(&self) -> Result<(f64, f64)> {
        let enh: Vec<ImageRgb> = self.train_views.iter().map(|&v| self.enhanced(v)).collect::<Result<_>>()?;
        let enh_refs: Vec<&ImageRgb> = enh.iter().collect();
        let low: Vec<&ImageRgb> = self.train_views.iter().map(|&v| &self.frames[v].rgb_low).collect();
        Ok((mean_luma_std(&enh_refs), mean_luma_std(&low)))
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn scene_name(&self) -> &str {
        &self.scene_name
    }

    pub fn frames(&self) -> &[MultiViewFrame] {
        &self.frames
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn enhancers(&self) -> &[EnhancerParams] {
        &self.enhancers
    }

    pub fn supervision(&self) -> &[SupervisionState] {
        &self.supervision
    }

    pub fn train_views(&self) -> &[usize] {
        &self.train_views
    }

    pub fn holdout_views(&self) -> &[usize] {
        &self.holdout_views
    }

    /// Mutable Gaussians (count fixed), for fault-injection tests.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian3D] {
        &mut self.gaussians
    }
}
