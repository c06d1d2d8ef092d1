//! Parametric Retinex enhancer.
//!
//! A low-light image is factored as `I_low = R ⊙ L` where the illumination
//! `L` is a single achromatic channel, the exponential of a bilinearly
//! upsampled per-view grid. Enhancement replaces `L` by the corrected
//! illumination `L' = L^(1/γ)` and recomposes `I_enh = R ⊙ L'`. Everything
//! here is differentiable by hand; [`EnhanceTape`] keeps the forward
//! intermediates needed by the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ImageGray, ImageRgb, LUMA};

/// Illumination floor.
pub const ILLUMINATION_EPS: f64 = 1e-3;
/// Contrast scale of the edge-aware smoothness weights `exp(-k·|∇Y|)`.
const EDGE_SHARPNESS: f64 = 10.0;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Per-view enhancer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancerParams {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Log illumination, row-major `grid_h × grid_w`.
    pub grid: Vec<f64>,
    /// Correction exponent before softplus.
    pub gamma_raw: f64,
    /// Target mean luma of the enhanced image.
    pub exposure_target: f64,
}

impl EnhancerParams {
    pub const DEFAULT_GAMMA: f64 = 2.2;

    /// `L ≡ 1`, `γ = 1`: enhancement is the identity.
    pub fn identity(grid_w: usize, grid_h: usize, exposure_target: f64) -> Self {
        Self {
            grid_w,
            grid_h,
            grid: vec![0.0; grid_w * grid_h],
            gamma_raw: softplus_inverse(1.0),
            exposure_target,
        }
    }

    /// Grid initialized to the log of each cell's max-RGB value (the usual
    /// Retinex illumination estimate), exponent initialized to 2.2.
    pub fn from_image(img: &ImageRgb, grid_w: usize, grid_h: usize, exposure_target: f64) -> Self {
        let mut cell_max = vec![ILLUMINATION_EPS; grid_w * grid_h];
        for y in 0..img.height {
            let gy = (y * grid_h / img.height).min(grid_h - 1);
            for x in 0..img.width {
                let gx = (x * grid_w / img.width).min(grid_w - 1);
                let p = img.pixel(x, y);
                let m = p[0].max(p[1]).max(p[2]);
                let c = &mut cell_max[gy * grid_w + gx];
                *c = c.max(m);
            }
        }
        Self {
            grid_w,
            grid_h,
            grid: cell_max.iter().map(|v| v.ln()).collect(),
            gamma_raw: softplus_inverse(Self::DEFAULT_GAMMA),
            exposure_target,
        }
    }

    /// Flat illumination at a robust white-patch estimate (the
    /// [`WHITE_PATCH_QUANTILE`](Self::WHITE_PATCH_QUANTILE) of per-pixel
    /// max-RGB), with the exponent solved by bisection so the enhanced mean
    /// luma equals the exposure target. The exponent is kept in
    /// `[1, MAX_CALIBRATED_GAMMA]`.
    pub fn calibrated(img: &ImageRgb, grid_w: usize, grid_h: usize, exposure_target: f64) -> Result<Self> {
        let mut p = Self::identity(grid_w, grid_h, exposure_target);
        let mut m: Vec<f64> = img.data.chunks_exact(3).map(|c| c[0].max(c[1]).max(c[2])).collect();
        if m.is_empty() {
            return Err(Error::InvalidConfig("empty image".into()));
        }
        let k = ((m.len() - 1) as f64 * Self::WHITE_PATCH_QUANTILE) as usize;
        let (_, white, _) = m.select_nth_unstable_by(k, f64::total_cmp);
        p.grid.fill(white.max(ILLUMINATION_EPS).ln());
        let mean_at = |p: &mut Self, g: f64| -> Result<f64> {
            p.gamma_raw = softplus_inverse(g);
            Ok(enhance(img, p)?.mean_luma())
        };
        let (mut lo, mut hi) = (1.0, Self::MAX_CALIBRATED_GAMMA);
        if mean_at(&mut p, lo)? >= exposure_target {
            p.gamma_raw = softplus_inverse(lo);
            return Ok(p);
        }
        if mean_at(&mut p, hi)? <= exposure_target {
            p.gamma_raw = softplus_inverse(hi);
            return Ok(p);
        }
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if mean_at(&mut p, mid)? < exposure_target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        p.gamma_raw = softplus_inverse(0.5 * (lo + hi));
        Ok(p)
    }

    pub const MAX_CALIBRATED_GAMMA: f64 = 20.0;
    pub const WHITE_PATCH_QUANTILE: f64 = 0.98;

    pub fn gamma(&self) -> f64 {
        softplus(self.gamma_raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 || self.grid.len() != self.grid_w * self.grid_h {
            return Err(Error::InvalidConfig("enhancer grid shape".into()));
        }
        if !self.grid.iter().all(|v| v.is_finite()) || !self.gamma_raw.is_finite() {
            return Err(Error::NonFiniteInput {
                what: "enhancer parameters",
            });
        }
        Ok(())
    }

    /// Trainable scalars: grid cells then `gamma_raw`.
    pub fn num_trainable(&self) -> usize {
        self.grid.len() + 1
    }
}

/// Gradient w.r.t. the trainable enhancer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancerGrad {
    pub grid: Vec<f64>,
    pub gamma_raw: f64,
}

impl EnhancerGrad {
    pub fn zeros(params: &EnhancerParams) -> Self {
        Self {
            grid: vec![0.0; params.grid.len()],
            gamma_raw: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &EnhancerGrad, s: f64) {
        for (a, b) in self.grid.iter_mut().zip(&other.grid) {
            *a += s * b;
        }
        self.gamma_raw += s * other.gamma_raw;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub reflectance: ImageRgb,
    pub illumination: ImageGray,
    pub corrected: ImageGray,
}

/// Bilinear sampling positions along one axis (cell-centered, edge-clamped).
#[derive(Clone, Debug)]
struct AxisWeights {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisWeights {
    fn new(pixels: usize, cells: usize) -> Self {
        let mut lo = Vec::with_capacity(pixels);
        let mut hi = Vec::with_capacity(pixels);
        let mut frac = Vec::with_capacity(pixels);
        for i in 0..pixels {
            let g = ((i as f64 + 0.5) * cells as f64 / pixels as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
            let l = (g.floor() as usize).min(cells - 1);
            lo.push(l);
            hi.push((l + 1).min(cells - 1));
            frac.push(g - l as f64);
        }
        Self { lo, hi, frac }
    }
}

fn upsample(params: &EnhancerParams, width: usize, height: usize) -> (Vec<f64>, AxisWeights, AxisWeights) {
    let ax = AxisWeights::new(width, params.grid_w);
    let ay = AxisWeights::new(height, params.grid_h);
    let gw = params.grid_w;
    let g = &params.grid;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
        for x in 0..width {
            let (x0, x1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
            let top = g[y0 * gw + x0] * (1.0 - fx) + g[y0 * gw + x1] * fx;
            let bot = g[y1 * gw + x0] * (1.0 - fx) + g[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    (out, ax, ay)
}

fn upsample_backward(
    params: &EnhancerParams,
    ax: &AxisWeights,
    ay: &AxisWeights,
    width: usize,
    height: usize,
    d_up: &[f64],
) -> Vec<f64> {
    let gw = params.grid_w;
    let mut d = vec![0.0; params.grid.len()];
    for y in 0..height {
        let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
        for x in 0..width {
            let g = d_up[y * width + x];
            if g == 0.0 {
                continue;
            }
            let (x0, x1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
            d[y0 * gw + x0] += g * (1.0 - fx) * (1.0 - fy);
            d[y0 * gw + x1] += g * fx * (1.0 - fy);
            d[y1 * gw + x0] += g * (1.0 - fx) * fy;
            d[y1 * gw + x1] += g * fx * fy;
        }
    }
    d
}

/// Forward intermediates of one enhancer evaluation.
#[derive(Clone, Debug)]
pub struct EnhanceTape {
    pub decomposition: Decomposition,
    pub enhanced: ImageRgb,
    /// Upsampled log illumination before the floor.
    log_illumination: Vec<f64>,
    gamma: f64,
    ax: AxisWeights,
    ay: AxisWeights,
}

impl EnhanceTape {
    pub fn forward(i_low: &ImageRgb, params: &EnhancerParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = i_low.dims();
        let (log_l, ax, ay) = upsample(params, w, h);
        let gamma = params.gamma();
        let illumination = ImageGray {
            width: w,
            height: h,
            data: log_l.iter().map(|u| u.exp().max(ILLUMINATION_EPS)).collect(),
        };
        let corrected = correct_with_gamma(&illumination, gamma);
        let mut reflectance = ImageRgb::new(w, h);
        let mut enhanced = ImageRgb::new(w, h);
        for i in 0..w * h {
            let l = illumination.data[i];
            let lp = corrected.data[i];
            for c in 0..3 {
                let r = (i_low.data[3 * i + c] / l).clamp(0.0, 1.0);
                reflectance.data[3 * i + c] = r;
                enhanced.data[3 * i + c] = (r * lp).clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            decomposition: Decomposition {
                reflectance,
                illumination,
                corrected,
            },
            enhanced,
            log_illumination: log_l,
            gamma,
            ax,
            ay,
        })
    }

    /// Chain rule from upstream gradients to the grid and `gamma_raw`.
    ///
    /// `d_enhanced` is w.r.t. `I_enh`, `d_illumination` w.r.t. the floored
    /// illumination `L`, `d_log_illumination` w.r.t. the upsampled log grid.
    pub fn backward(
        &self,
        i_low: &ImageRgb,
        params: &EnhancerParams,
        d_enhanced: Option<&ImageRgb>,
        d_illumination: Option<&[f64]>,
        d_log_illumination: Option<&[f64]>,
    ) -> EnhancerGrad {
        let (w, h) = i_low.dims();
        let dec = &self.decomposition;
        let gamma = self.gamma;
        let mut d_up = vec![0.0; w * h];
        let mut d_gamma = 0.0;
        for i in 0..w * h {
            let l = dec.illumination.data[i];
            let mut g_l = d_illumination.map_or(0.0, |d| d[i]);
            if let Some(de) = d_enhanced {
                let lp = dec.corrected.data[i];
                let mut g_lp = 0.0;
                for c in 0..3 {
                    let ge = de.data[3 * i + c];
                    if ge == 0.0 {
                        continue;
                    }
                    let r = dec.reflectance.data[3 * i + c];
                    g_lp += ge * r;
                    let ratio = i_low.data[3 * i + c] / l;
                    if ratio > 0.0 && ratio < 1.0 {
                        g_l += ge * lp * (-ratio / l);
                    }
                }
                let p = l.powf(1.0 / gamma);
                if p > ILLUMINATION_EPS && p < 1.0 {
                    g_l += g_lp * p / (gamma * l);
                    d_gamma += g_lp * p * l.ln() * (-1.0 / (gamma * gamma));
                }
            }
            let lr = self.log_illumination[i].exp();
            let mut g_u = if lr > ILLUMINATION_EPS { g_l * lr } else { 0.0 };
            if let Some(d) = d_log_illumination {
                g_u += d[i];
            }
            d_up[i] = g_u;
        }
        EnhancerGrad {
            grid: upsample_backward(params, &self.ax, &self.ay, w, h, &d_up),
            gamma_raw: d_gamma * crate::scene::sigmoid(params.gamma_raw),
        }
    }
}

fn correct_with_gamma(l: &ImageGray, gamma: f64) -> ImageGray {
    ImageGray {
        width: l.width,
        height: l.height,
        data: l
            .data
            .iter()
            .map(|v| v.powf(1.0 / gamma).clamp(ILLUMINATION_EPS, 1.0))
            .collect(),
    }
}

/// `L = max(exp(upsample(grid)), ε)`, `R = clamp(I_low / L, 0, 1)`.
pub fn decompose(i_low: &ImageRgb, params: &EnhancerParams) -> Result<Decomposition> {
    Ok(EnhanceTape::forward(i_low, params)?.decomposition)
}

/// `L' = clamp(L^(1/γ), ε, 1)`.
pub fn correct_illumination(l: &ImageGray, params: &EnhancerParams) -> ImageGray {
    correct_with_gamma(l, params.gamma())
}

/// `I_enh = R ⊙ L'`.
pub fn enhance(i_low: &ImageRgb, params: &EnhancerParams) -> Result<ImageRgb> {
    Ok(EnhanceTape::forward(i_low, params)?.enhanced)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancementWeights {
    pub reconstruction: f64,
    pub smoothness: f64,
    pub exposure: f64,
}

impl Default for EnhancementWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            smoothness: 0.1,
            exposure: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnhancementLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub smoothness: f64,
    pub exposure: f64,
}

/// Retinex loss: `‖R⊙L − I_low‖₁` + edge-aware TV of `log L` + exposure prior
/// `|mean_luma(I_enh) − E|`. Returns the loss and its gradient w.r.t. the
/// trainable parameters.
pub fn enhancement_loss(
    i_low: &ImageRgb,
    tape: &EnhanceTape,
    params: &EnhancerParams,
    weights: &EnhancementWeights,
) -> (EnhancementLoss, EnhancerGrad) {
    let (w, h) = i_low.dims();
    let n = w * h;
    let dec = &tape.decomposition;

    // R ⊙ L equals I_low except where R is clamped at 1, where it is L.
    let mut rec = 0.0;
    let mut d_l = vec![0.0; n];
    let rec_scale = weights.reconstruction / (3 * n) as f64;
    for i in 0..n {
        let l = dec.illumination.data[i];
        for c in 0..3 {
            let r = dec.reflectance.data[3 * i + c];
            let v = i_low.data[3 * i + c];
            rec += (r * l - v).abs();
            if v > l {
                d_l[i] -= rec_scale;
            }
        }
    }
    rec /= (3 * n) as f64;

    let luma = i_low.luma();
    let u = &tape.log_illumination;
    let pairs = (w.saturating_sub(1)) * h + w * (h.saturating_sub(1));
    let mut tv = 0.0;
    let mut d_u = vec![0.0; n];
    if pairs > 0 {
        let tv_scale = weights.smoothness / pairs as f64;
        let mut visit = |a: usize, b: usize| {
            let wt = (-EDGE_SHARPNESS * (luma.data[b] - luma.data[a]).abs()).exp();
            let diff = u[b] - u[a];
            tv += wt * diff.abs();
            let s = tv_scale * wt * sign(diff);
            d_u[b] += s;
            d_u[a] -= s;
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    visit(i, i + 1);
                }
                if y + 1 < h {
                    visit(i, i + w);
                }
            }
        }
        tv /= pairs as f64;
    }

    let mean_luma = tape.enhanced.mean_luma();
    let exp_diff = mean_luma - params.exposure_target;
    let exposure = exp_diff.abs();
    let mut d_enh = ImageRgb::new(w, h);
    let g = weights.exposure * sign(exp_diff) / n as f64;
    if g != 0.0 {
        for px in d_enh.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = g * LUMA[c];
            }
        }
    }

    let grad = tape.backward(i_low, params, Some(&d_enh), Some(&d_l), Some(&d_u));
    let loss = EnhancementLoss {
        total: weights.reconstruction * rec + weights.smoothness * tv + weights.exposure * exposure,
        reconstruction: rec,
        smoothness: tv,
        exposure,
    };
    (loss, grad)
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
