//! Thermal-guided, Retinex-coupled Gaussian splatting.

pub mod dataset;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod render;
pub mod retinex;
pub mod scene;
pub mod schedule;
pub mod thermal;
pub mod train;

pub use error::{Error, Result};
pub use retinex::EnhancerParams;
pub use scene::{Camera, Gaussian3D, ImageGray, ImageRgb, MultiViewFrame};
pub use train::{RunConfig, SceneData, Trainer};
