//! `thermosplat` command-line driver.
//!
//! Exit codes: 0 success, 1 validation or I/O error, 2 numerical failure
//! (non-finite loss or gradient, failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use thermosplat_core::dataset::io::{save_gray_png, save_rgb_png};
use thermosplat_core::dataset::{generate_scene, load_checkpoint, save_checkpoint, save_scene, SyntheticSceneSpec};
use thermosplat_core::gradsuite::{run_suite, SuiteConfig};
use thermosplat_core::metrics::MetricReport;
use thermosplat_core::params::ParamClass;
use thermosplat_core::render::render;
use thermosplat_core::train::{read_log, run_ablation, validate_log, write_log, Variant};
use thermosplat_core::{Error, ImageRgb, Result, RunConfig, SceneData, Trainer};

#[derive(Parser, Debug)]
#[command(name = "thermosplat", version, about = "Thermal-guided Gaussian splatting for low-light scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic RGB + thermal scene directory.
    GenData(GenDataArgs),
    /// Train on a scene; writes the loss log, checkpoints and held-out metrics.
    Train(TrainArgs),
    /// Render views of a checkpoint to PNG.
    Render(RenderArgs),
    /// Evaluate a checkpoint on held-out (or training) views.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every ablation variant on seeded scenes and compare.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Scene spec (JSON). Defaults to the built-in desk scene.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
}

/// Flags shared by commands that build a run configuration.
#[derive(Args, Debug, Clone)]
struct RunFlags {
    /// Run config (flat JSON). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory, overriding the config.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    disable_cyclic: bool,
    #[arg(long)]
    disable_thermal: bool,
    /// Training resolution as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated view ids; all views when absent.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    views: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    /// `holdout`, `train` or `all`.
    #[arg(long, default_value = "holdout")]
    split: String,
    /// Compare against `{id:03}_rgb.png` images in this directory instead of
    /// the scene's references.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Training log to validate before evaluating.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Metrics CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First seed of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Deliberately corrupt the renderer gradient of one class (test hook).
    #[arg(long)]
    corrupt: Option<String>,
    /// Report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeded scenes: the desk scene, then desk variants.
    #[arg(long, default_value_t = 3)]
    scenes: u64,
}

fn parse_resolution(s: &str) -> std::result::Result<[usize; 2], String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let r = [p(w)?, p(h)?];
    if r[0] == 0 || r[1] == 0 {
        return Err("resolution must be positive".into());
    }
    Ok(r)
}

impl RunFlags {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = &self.scene {
            cfg.scene = Some(s.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iters {
            cfg.iters = n;
        }
        cfg.disable_cyclic |= self.disable_cyclic;
        cfg.disable_thermal |= self.disable_thermal;
        if self.resolution.is_some() {
            cfg.resolution = self.resolution;
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SyntheticSceneSpec>(&text).map_err(|source| Error::Json {
                path: p.clone(),
                source,
            })?
        }
        None => SyntheticSceneSpec::desk(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some([w, h]) = args.resolution {
        spec.width = w;
        spec.height = h;
    }
    spec.validate()?;
    let scene = generate_scene(&spec)?;
    let meta = serde_json::json!({ "generator": spec });
    save_scene(&scene.frames, &args.out, &meta, Some(&scene.points))?;
    for (i, f) in scene.frames.iter().enumerate() {
        let gt = f.rgb_gt_bright.as_ref().map_or(f64::NAN, ImageRgb::mean_luma);
        println!(
            "view {i:03}: low luma {:.4}  bright luma {:.4}  thermal mean {:.4}",
            f.rgb_low.mean_luma(),
            gt,
            f.thermal.data.iter().sum::<f64>() / f.thermal.data.len() as f64
        );
    }
    println!("wrote {} views to {}", scene.frames.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.run.config()?;
    let scene = SceneData::from_config(&cfg)?;
    mkdir(&args.out)?;
    write_text(
        &args.out.join("config.json"),
        &serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes"),
    )?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p, Some(&cfg.to_json()))?;
            info!("resuming from {} at iteration {}", p.display(), ckpt.t);
            Trainer::from_checkpoint(cfg.clone(), &scene, &ckpt)?
        }
        None => Trainer::new(cfg.clone(), &scene)?,
    };
    let initial = trainer.evaluate_holdout().ok();
    let ckpt_path = args.out.join("checkpoint.dtgs");
    let interval = cfg.checkpoint_interval;
    let report_every = (cfg.iters / 20).max(1);
    let rows = trainer.run_until(cfg.iters, |tr, row| {
        if (row.t + 1) % report_every == 0 {
            info!(
                "t={} view={} alpha={:.3} loss={:.5} gaussians={}",
                row.t, row.view, row.alpha, row.loss_total, row.num_gaussians
            );
        }
        if interval > 0 && tr.t() % interval == 0 && tr.t() < cfg.iters {
            save_checkpoint(&ckpt_path, &tr.checkpoint())?;
        }
        Ok(())
    })?;
    let log_path = args.out.join("log.csv");
    let mut buf = Vec::new();
    write_log(&rows, &mut buf).map_err(|e| Error::io(&log_path, e))?;
    if args.resume.is_some() && log_path.exists() {
        // Append to the existing log without repeating the header.
        let mut old = fs::read(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let body = buf.splitn(2, |&b| b == b'\n').nth(1).unwrap_or_default();
        old.extend_from_slice(body);
        buf = old;
    }
    fs::write(&log_path, &buf).map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    match trainer.evaluate_holdout() {
        Ok(report) => {
            report.save_csv(&args.out.join("metrics.csv"))?;
            if let Some(m0) = initial {
                println!("held-out PSNR {:.3} dB -> {:.3} dB", m0.mean_psnr(), report.mean_psnr());
            }
            println!("held-out SSIM {:.4}", report.mean_ssim());
        }
        Err(e) => warn!("no held-out evaluation: {e}"),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Trainer rebuilt from a checkpoint, with the stored config unless one is given.
fn restore(checkpoint: &Path, config: Option<&Path>, scene: Option<&Path>) -> Result<Trainer> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::InvalidConfig(format!("checkpoint config: {e}")))?,
    };
    if let Some(s) = scene {
        cfg.scene = Some(s.to_path_buf());
    }
    let data = SceneData::from_config(&cfg)?;
    Trainer::from_checkpoint(cfg, &data, &ckpt)
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let tr = restore(&args.checkpoint, args.config.as_deref(), args.scene.as_deref())?;
    let views = args.views.unwrap_or_else(|| (0..tr.frames().len()).collect());
    for &v in &views {
        if v >= tr.frames().len() {
            return Err(Error::UnknownView(v));
        }
    }
    if views.is_empty() {
        return Ok(());
    }
    mkdir(&args.out)?;
    for &v in &views {
        let out = render(tr.gaussians(), &tr.frames()[v].camera, tr.config().background)?;
        save_rgb_png(&out.color, &args.out.join(format!("{v:03}_rgb.png")))?;
        save_gray_png(&out.final_transmittance, &args.out.join(format!("{v:03}_transmittance.png")))?;
        if tr.train_views().contains(&v) {
            save_rgb_png(&tr.enhanced(v)?, &args.out.join(format!("{v:03}_enhanced.png")))?;
        }
    }
    println!("rendered {} views to {}", views.len(), args.out.display());
    Ok(())
}

fn load_png(path: &Path, w: usize, h: usize, view: usize) -> Result<ImageRgb> {
    let img = image::open(path)
        .map_err(|e| Error::View {
            view,
            message: format!("{}: {e}", path.display()),
        })?
        .to_rgb8();
    if (img.width() as usize, img.height() as usize) != (w, h) {
        return Err(Error::View {
            view,
            message: format!("{} is {}x{}, expected {w}x{h}", path.display(), img.width(), img.height()),
        });
    }
    Ok(ImageRgb {
        width: w,
        height: h,
        data: img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}

fn quantized(img: &ImageRgb) -> ImageRgb {
    ImageRgb {
        data: img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        ..img.clone()
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    if let Some(p) = &args.log {
        validate_log(&read_log(p)?)?;
    }
    let tr = restore(&args.checkpoint, args.config.as_deref(), args.scene.as_deref())?;
    let views: Vec<usize> = match args.split.as_str() {
        "holdout" => tr.holdout_views().to_vec(),
        "train" => tr.train_views().to_vec(),
        "all" => (0..tr.frames().len()).collect(),
        other => return Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
    };
    if views.is_empty() {
        return Err(Error::InvalidConfig(format!("split `{}` has no views", args.split)));
    }
    let report = match &args.reference {
        None => tr.evaluate(&views)?,
        Some(dir) => {
            let mut r = MetricReport::default();
            for &v in &views {
                let (w, h) = tr.frames()[v].rgb_low.dims();
                let reference = load_png(&dir.join(format!("{v:03}_rgb.png")), w, h, v)?;
                // References on disk are 8-bit; compare like with like.
                r.push(tr.scene_name(), v, &quantized(&tr.render_view(v)?), &reference)?;
            }
            r
        }
    };
    match &args.out {
        Some(p) => report.save_csv(p)?,
        None => report.write_csv(std::io::stdout().lock()).map_err(|e| Error::io("<stdout>", e))?,
    }
    eprintln!(
        "{} views: mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.rows.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}

fn parse_class(name: &str) -> Result<ParamClass> {
    ParamClass::GAUSSIAN
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown renderer parameter class `{name}`")))
}

/// Returns whether every check passed.
fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let cfg = SuiteConfig {
        seeds: (args.seed..args.seed + args.seeds).collect(),
        corrupt: args.corrupt.as_deref().map(parse_class).transpose()?,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg)?;
    for l in &report.lines {
        println!(
            "{:<12} {:<16} n={:<6} skipped={:<3} max rel err {:.3e}  {}",
            l.component,
            l.quantity,
            l.count,
            l.skipped,
            l.max_rel_error,
            if l.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "h = {:e}, tolerance {:e}: {}",
        report.step,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(p) = &args.out {
        write_text(p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(report.passed)
}

fn ablate(args: AblateArgs) -> Result<()> {
    let base = args.run.config()?;
    let scenes = match &base.scene {
        Some(dir) => vec![SceneData::load(dir)?],
        None => (0..args.scenes)
            .map(|i| {
                let spec = if i == 0 {
                    SyntheticSceneSpec::desk()
                } else {
                    SyntheticSceneSpec::desk_variant(i)
                };
                SceneData::generate(&format!("desk{i}"), &spec)
            })
            .collect::<Result<_>>()?,
    };
    let report = run_ablation(&base, &scenes, &Variant::ALL, |row| {
        println!(
            "{:<8} {:<20} PSNR {:>7.3} dB  SSIM {:.4}",
            row.scene,
            row.variant.name(),
            row.psnr_db,
            row.ssim
        );
    })?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    report.save_csv(&args.out)?;
    for v in Variant::ALL {
        println!("mean {:<20} PSNR {:.3} dB", v.name(), report.mean_psnr(v));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
