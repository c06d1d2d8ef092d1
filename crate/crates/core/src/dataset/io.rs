//! Scene directories: 8-bit PNG images, `poses.json`, `meta.json` and an
//! optional `points.json`.
//!
//! ```text
//! scene/
//!   poses.json
//!   meta.json
//!   points.json            (optional)
//!   views/000_rgb_low.png
//!   views/000_thermal.png
//!   views/000_rgb_gt.png   (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, ImageGray, ImageRgb, MultiViewFrame};

use super::synth::PointCloud;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPose {
    pub id: usize,
    /// Row-major 4×4.
    pub world_to_camera: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl ViewPose {
    pub fn from_camera(id: usize, cam: &Camera) -> Self {
        Self {
            id,
            world_to_camera: cam.world_to_camera_matrix().to_vec(),
            intrinsics: Intrinsics {
                fx: cam.fx,
                fy: cam.fy,
                cx: cam.cx,
                cy: cam.cy,
            },
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let m: [f64; 16] = self.world_to_camera.as_slice().try_into().map_err(|_| Error::View {
            view: self.id,
            message: format!("world_to_camera has {} entries, expected 16", self.world_to_camera.len()),
        })?;
        let mut cam = Camera {
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
            width: self.width,
            height: self.height,
            rotation: nalgebra::Matrix3::identity(),
            translation: nalgebra::Vector3::zeros(),
        };
        cam.set_world_to_camera_matrix(&m);
        cam.validate().map_err(|e| Error::View {
            view: self.id,
            message: e.to_string(),
        })?;
        Ok(cam)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    pub views: Vec<ViewPose>,
}

#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub frames: Vec<MultiViewFrame>,
    pub view_ids: Vec<usize>,
    pub points: Option<PointCloud>,
    pub meta: serde_json::Value,
}

pub fn view_path(dir: &Path, id: usize, kind: &str) -> PathBuf {
    dir.join("views").join(format!("{id:03}_{kind}.png"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(img: &ImageRgb, path: &Path) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let out = RgbImage::from_raw(img.width as u32, img.height as u32, buf).expect("buffer sized from image");
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray_png(img: &ImageGray, path: &Path) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let out = GrayImage::from_raw(img.width as u32, img.height as u32, buf).expect("buffer sized from image");
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open_image(path: &Path, view: usize) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::View {
            view,
            message: format!("missing file {}", path.display()),
        });
    }
    image::open(path).map_err(|e| Error::View {
        view,
        message: format!("{}: {e}", path.display()),
    })
}

fn check_size(w: u32, h: u32, pose: &ViewPose, path: &Path) -> Result<()> {
    if (w as usize, h as usize) != (pose.width, pose.height) {
        return Err(Error::View {
            view: pose.id,
            message: format!(
                "{} is {w}x{h}, poses.json declares {}x{}",
                path.display(),
                pose.width,
                pose.height
            ),
        });
    }
    Ok(())
}

fn load_rgb(path: &Path, pose: &ViewPose) -> Result<ImageRgb> {
    let img = open_image(path, pose.id)?.to_rgb8();
    check_size(img.width(), img.height(), pose, path)?;
    Ok(ImageRgb {
        width: pose.width,
        height: pose.height,
        data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

fn load_gray(path: &Path, pose: &ViewPose) -> Result<ImageGray> {
    let img = open_image(path, pose.id)?.to_luma8();
    check_size(img.width(), img.height(), pose, path)?;
    Ok(ImageGray {
        width: pose.width,
        height: pose.height,
        data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `frames` (view ids `0..n`) with their metadata.
pub fn save_scene(
    frames: &[MultiViewFrame],
    dir: &Path,
    meta: &serde_json::Value,
    points: Option<&PointCloud>,
) -> Result<()> {
    for f in frames {
        f.validate()?;
    }
    let views = dir.join("views");
    fs::create_dir_all(&views).map_err(|e| Error::io(&views, e))?;
    let mut poses = PosesFile { views: Vec::new() };
    for (id, f) in frames.iter().enumerate() {
        save_rgb_png(&f.rgb_low, &view_path(dir, id, "rgb_low"))?;
        save_gray_png(&f.thermal, &view_path(dir, id, "thermal"))?;
        if let Some(gt) = &f.rgb_gt_bright {
            save_rgb_png(gt, &view_path(dir, id, "rgb_gt"))?;
        }
        poses.views.push(ViewPose::from_camera(id, &f.camera));
    }
    write_json(&dir.join("poses.json"), &poses)?;
    write_json(&dir.join("meta.json"), meta)?;
    if let Some(p) = points {
        write_json(&dir.join("points.json"), p)?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let poses: PosesFile = read_json(&dir.join("poses.json"))?;
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        read_json(&meta_path)?
    } else {
        serde_json::Value::Null
    };
    let mut frames = Vec::with_capacity(poses.views.len());
    let mut view_ids = Vec::with_capacity(poses.views.len());
    for pose in &poses.views {
        let camera = pose.camera()?;
        let rgb_low = load_rgb(&view_path(dir, pose.id, "rgb_low"), pose)?;
        let thermal = load_gray(&view_path(dir, pose.id, "thermal"), pose)?;
        let gt_path = view_path(dir, pose.id, "rgb_gt");
        let rgb_gt_bright = if gt_path.exists() {
            Some(load_rgb(&gt_path, pose)?)
        } else {
            None
        };
        frames.push(MultiViewFrame {
            rgb_low,
            thermal,
            camera,
            rgb_gt_bright,
        });
        view_ids.push(pose.id);
    }
    let points_path = dir.join("points.json");
    let points = if points_path.exists() {
        Some(read_json(&points_path)?)
    } else {
        None
    };
    Ok(LoadedScene {
        frames,
        view_ids,
        points,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{generate_scene, SyntheticSceneSpec};

    fn small_scene() -> crate::dataset::synth::SyntheticScene {
        let mut spec = SyntheticSceneSpec::desk();
        spec.width = 24;
        spec.height = 18;
        spec.num_views = 3;
        spec.num_points = 50;
        generate_scene(&spec).unwrap()
    }

    #[test]
    fn round_trip_within_quantization() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene.frames, dir.path(), &serde_json::json!({"k": 1}), Some(&scene.points)).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), 3);
        assert_eq!(loaded.view_ids, vec![0, 1, 2]);
        assert_eq!(loaded.points.as_ref(), Some(&scene.points));
        assert_eq!(loaded.meta["k"], 1);
        for (a, b) in scene.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.camera, b.camera);
            let err = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err(&a.rgb_low.data, &b.rgb_low.data) <= 1.0 / 255.0);
            assert!(err(&a.thermal.data, &b.thermal.data) <= 1.0 / 255.0);
            let (ga, gb) = (a.rgb_gt_bright.as_ref().unwrap(), b.rgb_gt_bright.as_ref().unwrap());
            assert!(err(&ga.data, &gb.data) <= 1.0 / 255.0);
        }
    }

    #[test]
    fn missing_thermal_names_view() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene.frames, dir.path(), &serde_json::Value::Null, None).unwrap();
        fs::remove_file(view_path(dir.path(), 1, "thermal")).unwrap();
        match load_scene(dir.path()) {
            Err(Error::View { view, message }) => {
                assert_eq!(view, 1);
                assert!(message.contains("001_thermal.png"), "{message}");
            }
            other => panic!("unexpected {:?}", other.map(|s| s.frames.len())),
        }
    }

    #[test]
    fn size_mismatch_names_view() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene.frames, dir.path(), &serde_json::Value::Null, None).unwrap();
        save_gray_png(&ImageGray::new(5, 5), &view_path(dir.path(), 2, "thermal")).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::View { view: 2, .. })));
    }

    #[test]
    fn malformed_json_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("poses.json"), "{ not json").unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Json { .. })));
    }
}
