//! Adam with per-class learning-rate multipliers, cosine learning-rate
//! schedules and opacity pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradBundle, ParamBundle, ParamClass, ParamLayout};
use crate::scene::Gaussian3D;

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.005;
pub const DEFAULT_PRUNE_INTERVAL: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrMultipliers {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub enhancer: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self {
            position: 1.0,
            log_scale: 0.5,
            rotation: 0.1,
            opacity: 5.0,
            color: 2.5,
            enhancer: 1.0,
        }
    }
}

impl LrMultipliers {
    pub fn get(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Position => self.position,
            ParamClass::LogScale => self.log_scale,
            ParamClass::Rotation => self.rotation,
            ParamClass::Opacity => self.opacity,
            ParamClass::Color => self.color,
            ParamClass::EnhancerGrid | ParamClass::EnhancerGamma => self.enhancer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Keeps the moments of Gaussians with `keep[i]`, dropping the rest.
    /// Enhancer moments are untouched.
    pub fn retain_gaussians(&mut self, layout: &ParamLayout, keep: &[bool]) {
        assert_eq!(keep.len(), layout.num_gaussians);
        let g = layout.gaussian_len();
        for buf in [&mut self.m, &mut self.v] {
            let mut out = Vec::with_capacity(buf.len());
            for (i, chunk) in buf[..g].chunks_exact(Gaussian3D::NUM_PARAMS).enumerate() {
                if keep[i] {
                    out.extend_from_slice(chunk);
                }
            }
            out.extend_from_slice(&buf[g..]);
            *buf = out;
        }
    }
}

/// One bias-corrected Adam update of `params` in place. Quaternions are
/// renormalized afterwards. A class multiplier of 0 freezes that class.
pub fn adam_step(
    params: &mut ParamBundle,
    grads: &GradBundle,
    state: &mut AdamState,
    lr: f64,
    mult: &LrMultipliers,
) -> Result<()> {
    let n = params.values.len();
    if grads.layout != params.layout || state.m.len() != n || state.v.len() != n {
        return Err(Error::InvalidConfig("optimizer state does not match parameter layout".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {lr} must be positive")));
    }
    grads.check_finite()?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let classes = params.layout.classes();
    for i in 0..n {
        let g = grads.values[i];
        let m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let step_lr = lr * mult.get(classes[i]);
        if step_lr != 0.0 {
            params.values[i] -= step_lr * (m / bc1) / ((v / bc2).sqrt() + state.eps);
        }
    }
    for chunk in params.values[..params.layout.gaussian_len()].chunks_exact_mut(Gaussian3D::NUM_PARAMS) {
        let q = &mut chunk[6..10];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            q.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    /// Cosine from base to base/100 within each period, restarting at every
    /// period boundary.
    WarmRestart { period: usize },
    /// A single cosine from base to base/100 over `total` iterations.
    Monotone { total: usize },
}

impl LrSchedule {
    pub fn lr(&self, t: usize, base_lr: f64) -> f64 {
        match *self {
            LrSchedule::WarmRestart { period } => cosine_lr(t, base_lr, period),
            LrSchedule::Monotone { total } => {
                let min = base_lr / 100.0;
                let r = (t.min(total) as f64) / total.max(1) as f64;
                min + (base_lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * r).cos())
            }
        }
    }
}

/// Warm-restart cosine with floor `base_lr / 100`.
pub fn cosine_lr(t: usize, base_lr: f64, period: usize) -> f64 {
    assert!(period > 0, "cosine period must be positive");
    let min = base_lr / 100.0;
    let phase = (t % period) as f64 / period as f64;
    min + (base_lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Drops Gaussians whose opacity is below `threshold`. Returns the old→new
/// index map.
pub fn prune(gaussians: &mut Vec<Gaussian3D>, threshold: f64) -> Vec<Option<usize>> {
    let mut remap = Vec::with_capacity(gaussians.len());
    let mut next = 0;
    for g in gaussians.iter() {
        if g.opacity() < threshold {
            remap.push(None);
        } else {
            remap.push(Some(next));
            next += 1;
        }
    }
    let mut i = 0;
    gaussians.retain(|_| {
        let keep = remap[i].is_some();
        i += 1;
        keep
    });
    remap
}
