//! Ablation harness: the full method against variants with one component
//! removed, trained with a shared configuration and seed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::RunConfig;
use super::trainer::{SceneData, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutCyclic,
    WithoutThermal,
    /// Splatting on images enhanced once by a frozen, separately fitted
    /// enhancer.
    RetinexPreprocess,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutCyclic,
        Variant::WithoutThermal,
        Variant::RetinexPreprocess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutCyclic => "wo_cyclic",
            Variant::WithoutThermal => "wo_thermal",
            Variant::RetinexPreprocess => "retinex_preprocess",
        }
    }

    /// `base` with this variant's switches applied.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.disable_cyclic = false;
        c.disable_thermal = false;
        c.retinex_preprocess = false;
        match self {
            Variant::Full => {}
            Variant::WithoutCyclic => c.disable_cyclic = true,
            Variant::WithoutThermal => c.disable_thermal = true,
            Variant::RetinexPreprocess => c.retinex_preprocess = true,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub scene: String,
    pub variant: Variant,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean held-out PSNR of `variant` over all scenes.
    pub fn mean_psnr(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.psnr_db).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_ssim(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.ssim).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "scene,variant,ssim,psnr_db")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{:.6}", r.scene, r.variant.name(), r.ssim, r.psnr_db)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Trains every variant on every scene and evaluates held-out views.
/// `on_done` is called after each run.
pub fn run_ablation<F>(base: &RunConfig, scenes: &[SceneData], variants: &[Variant], mut on_done: F) -> Result<AblationReport>
where
    F: FnMut(&AblationRow),
{
    let mut report = AblationReport::default();
    for scene in scenes {
        for &variant in variants {
            let mut trainer = Trainer::new(variant.configure(base), scene)?;
            trainer.run()?;
            let m = trainer.evaluate_holdout()?;
            let row = AblationRow {
                scene: scene.name.clone(),
                variant,
                psnr_db: m.mean_psnr(),
                ssim: m.mean_ssim(),
            };
            on_done(&row);
            report.rows.push(row);
        }
    }
    Ok(report)
}
