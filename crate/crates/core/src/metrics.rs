//! PSNR and windowed SSIM.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
//! dynamic range 1, evaluated over every fully contained window ("valid"
//! placement), per channel, then averaged. [`ssim_with_grad`] also returns
//! the analytic gradient w.r.t. both inputs; the training loss uses it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ImageRgb;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    b.check_same_dims(a.dims(), "mse")?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)`, capped at 99 dB for identical images.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode correlation; output is `(w-10) × (h-10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (j, kj) in k.iter().enumerate() {
            let t = &tmp[(y + j) * ow..(y + j + 1) * ow];
            let o = &mut out[y * ow..(y + 1) * ow];
            for x in 0..ow {
                o[x] += kj * t[x];
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        let m = &map[y * ow..(y + 1) * ow];
        for (j, kj) in k.iter().enumerate() {
            let t = &mut tmp[(y + j) * ow..(y + j + 1) * ow];
            for x in 0..ow {
                t[x] += kj * m[x];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let t = &tmp[y * ow..(y + 1) * ow];
        let o = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            let v = t[x];
            for (j, kj) in k.iter().enumerate() {
                o[x + j] += kj * v;
            }
        }
    }
    out
}

struct ChannelSsim {
    value: f64,
    grads: Option<(Vec<f64>, Vec<f64>)>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, with_grad: bool) -> ChannelSsim {
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &k);
    let mu_y = filter_valid(y, w, h, &k);
    let e_xx = filter_valid(&xx, w, h, &k);
    let e_yy = filter_valid(&yy, w, h, &k);
    let e_xy = filter_valid(&xy, w, h, &k);
    let nwin = mu_x.len();
    let inv = 1.0 / nwin as f64;

    let mut total = 0.0;
    let (mut dmx, mut dmy, mut dxx, mut dyy, mut dxy) = if with_grad {
        (vec![0.0; nwin], vec![0.0; nwin], vec![0.0; nwin], vec![0.0; nwin], vec![0.0; nwin])
    } else {
        Default::default()
    };
    for i in 0..nwin {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * (e_xy[i] - mx * my) + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = (e_xx[i] - mx * mx) + (e_yy[i] - my * my) + C2;
        let d = b1 * b2;
        let s = a1 * a2 / d;
        total += s;
        if with_grad {
            dmx[i] = inv * 2.0 * (my * (a2 - a1) - mx * s * (b2 - b1)) / d;
            dmy[i] = inv * 2.0 * (mx * (a2 - a1) - my * s * (b2 - b1)) / d;
            dxx[i] = -inv * s / b2;
            dyy[i] = -inv * s / b2;
            dxy[i] = inv * 2.0 * a1 / d;
        }
    }
    let grads = with_grad.then(|| {
        let amx = filter_valid_adjoint(&dmx, w, h, &k);
        let amy = filter_valid_adjoint(&dmy, w, h, &k);
        let axx = filter_valid_adjoint(&dxx, w, h, &k);
        let ayy = filter_valid_adjoint(&dyy, w, h, &k);
        let axy = filter_valid_adjoint(&dxy, w, h, &k);
        let gx = (0..w * h).map(|p| amx[p] + 2.0 * x[p] * axx[p] + y[p] * axy[p]).collect();
        let gy = (0..w * h).map(|p| amy[p] + 2.0 * y[p] * ayy[p] + x[p] * axy[p]).collect();
        (gx, gy)
    });
    ChannelSsim {
        value: total * inv,
        grads,
    }
}

fn check_ssim_dims(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    b.check_same_dims(a.dims(), "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidConfig(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    Ok(())
}

fn channel(img: &ImageRgb, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_ssim_dims(a, b)?;
    let (w, h) = a.dims();
    let s: f64 = (0..3)
        .map(|c| ssim_channel(&channel(a, c), &channel(b, c), w, h, false).value)
        .sum();
    Ok(s / 3.0)
}

/// SSIM and its gradient w.r.t. `a` and `b`.
pub fn ssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, ImageRgb, ImageRgb)> {
    check_ssim_dims(a, b)?;
    let (w, h) = a.dims();
    let mut ga = ImageRgb::new(w, h);
    let mut gb = ImageRgb::new(w, h);
    let mut total = 0.0;
    for c in 0..3 {
        let r = ssim_channel(&channel(a, c), &channel(b, c), w, h, true);
        total += r.value;
        let (gx, gy) = r.grads.expect("requested");
        for p in 0..w * h {
            ga.data[3 * p + c] = gx[p] / 3.0;
            gb.data[3 * p + c] = gy[p] / 3.0;
        }
    }
    Ok((total / 3.0, ga, gb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetric {
    pub scene: String,
    pub view_id: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ViewMetric>,
}

impl MetricReport {
    pub fn push(&mut self, scene: &str, view_id: usize, rendered: &ImageRgb, reference: &ImageRgb) -> Result<()> {
        self.rows.push(ViewMetric {
            scene: scene.to_string(),
            view_id,
            psnr_db: psnr(rendered, reference)?,
            ssim: ssim(rendered, reference)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "scene,view_id,psnr_db,ssim")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{:.6}", r.scene, r.view_id, r.psnr_db, r.ssim)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
