//! Synthetic scene generation, scene directories, checkpoints and Gaussian
//! initialization.

pub mod checkpoint;
pub mod init;
pub mod io;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use init::{init_gaussians, random_init, DEFAULT_KNN};
pub use io::{load_scene, save_scene, LoadedScene, PosesFile, ViewPose};
pub use synth::{darken, generate_scene, PointCloud, SceneObject, Shape, SyntheticScene, SyntheticSceneSpec};

/// Default held-out cadence: every 8th view starting at 0.
pub const HOLDOUT_EVERY: usize = 8;

/// Splits view indices `0..n` into (train, held-out), holding out every
/// `every`-th view starting at 0.
pub fn split_views(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&v| v % every != 0)
}

use crate::scene::{ImageGray, ImageRgb, MultiViewFrame};

/// Bilinear resampling of `channels`-interleaved samples with pixel centers
/// mapped as in [`crate::scene::Camera::resized`].
fn resample(data: &[f64], w: usize, h: usize, channels: usize, nw: usize, nh: usize) -> Vec<f64> {
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut out = Vec::with_capacity(nw * nh * channels);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..channels {
                let at = |xx: usize, yy: usize| data[(yy * w + xx) * channels + c];
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

pub fn resize_rgb(img: &ImageRgb, width: usize, height: usize) -> ImageRgb {
    ImageRgb {
        width,
        height,
        data: resample(&img.data, img.width, img.height, 3, width, height),
    }
}

pub fn resize_gray(img: &ImageGray, width: usize, height: usize) -> ImageGray {
    ImageGray {
        width,
        height,
        data: resample(&img.data, img.width, img.height, 1, width, height),
    }
}

/// A frame resampled to `width × height` with rescaled intrinsics.
pub fn resize_frame(f: &MultiViewFrame, width: usize, height: usize) -> MultiViewFrame {
    if (f.camera.width, f.camera.height) == (width, height) {
        return f.clone();
    }
    MultiViewFrame {
        rgb_low: resize_rgb(&f.rgb_low, width, height),
        thermal: resize_gray(&f.thermal, width, height),
        camera: f.camera.resized(width, height),
        rgb_gt_bright: f.rgb_gt_bright.as_ref().map(|g| resize_rgb(g, width, height)),
    }
}
