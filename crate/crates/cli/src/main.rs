//! `ftgs`: synthesize, train, render and evaluate space-time Gaussian scenes.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing files, bad manifests, unknown cameras), 3 numeric failure.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use ftgs_core::config::{key_reference_text, EngineConfig};
use ftgs_core::error::ErrorKind;
use ftgs_core::rasterizer::{render_forward, RasterConfig};
use ftgs_core::scenedata::{
    generate_synthetic_scene, save_png, CameraSpec, Checkpoint, Preset, Scene, SplitKind,
};
use ftgs_core::train::{evaluate, Dataset, Trainer};
use ftgs_core::Camera;

#[derive(Parser, Debug)]
#[command(name = "ftgs", version, about = "Space-time Gaussian splatting on the CPU", after_long_help = config_help())]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-view scene and its ground-truth checkpoint.
    Synth {
        /// static-blobs, moving-blobs or crossing-blobs.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize primitives against a scene.
    #[command(after_long_help = config_help())]
    Train {
        /// Scene manifest (scene.json).
        #[arg(long)]
        scene: PathBuf,
        /// TOML configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. `--set train.iterations=3000`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint (its stored configuration is the base).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory for checkpoints, config.toml and train.log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one image from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera id from the scene manifest.
        #[arg(long, required_unless_present = "camera_json")]
        camera: Option<String>,
        /// Inline camera as manifest JSON (id, fx, fy, cx, cy, width, height, rotation, translation).
        #[arg(long, conflicts_with = "camera")]
        camera_json: Option<String>,
        /// Normalized time in [0, 1].
        #[arg(long)]
        time: f64,
        /// Scene manifest; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a split of a scene.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// test or train.
        #[arg(long, default_value = "test")]
        split: String,
        /// TOML report path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_help() -> String {
    format!(
        "Configuration keys (set in a TOML file or with --set KEY=VALUE):\n{}",
        key_reference_text()
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("usage error");
            eprintln!("{line}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .parse_env("FTGS_LOG")
        .format_target(false)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<ftgs_core::Error>() {
            return match err.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
    }
    2
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { preset, seed, out } => synth(&preset, seed, &out),
        Command::Train {
            scene,
            config,
            overrides,
            resume,
            out,
        } => train(
            &scene,
            config.as_deref(),
            &overrides,
            resume.as_deref(),
            &out,
        ),
        Command::Render {
            checkpoint,
            camera,
            camera_json,
            time,
            scene,
            out,
        } => render(
            &checkpoint,
            camera.as_deref(),
            camera_json.as_deref(),
            time,
            scene.as_deref(),
            &out,
        ),
        Command::Eval {
            checkpoint,
            scene,
            split,
            out,
        } => eval(&checkpoint, &scene, &split, &out),
    }
}

fn synth(preset: &str, seed: u64, out: &Path) -> anyhow::Result<()> {
    let p = Preset::from_name(preset).ok_or_else(|| {
        usage(format!(
            "unknown preset `{preset}` (expected static-blobs, moving-blobs or crossing-blobs)"
        ))
    })?;
    let scene = generate_synthetic_scene(p, seed)?;
    let manifest = scene
        .write(out)
        .with_context(|| format!("writing {}", out.display()))?;
    info!(
        "wrote {} frames of {} to {}",
        scene.images.len(),
        p.name(),
        manifest.display()
    );
    println!("{}", manifest.display());
    Ok(())
}

fn train(
    scene_path: &Path,
    config: Option<&Path>,
    overrides: &[String],
    resume: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    let cfg = match (&ckpt, config) {
        (Some(c), None) => EngineConfig::from_json(&c.config)?.with_overrides(overrides)?,
        _ => EngineConfig::load(config, overrides)?,
    };
    let scene = Scene::load(scene_path)?;
    let data = Dataset::from_scene(&scene)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())
        .with_context(|| format!("writing {}", out.join("config.toml").display()))?;
    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(&data, cfg.clone(), c)?,
        None => Trainer::new(&data, cfg.clone())?,
    };
    let log_path = out.join("train.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let scene_ref = Some(scene_path.display().to_string());
    info!(
        "training {} primitives for {} iterations (from {})",
        trainer.set.count(),
        trainer.total,
        trainer.iteration
    );
    let log_every = cfg.train.log_every;
    let ckpt_every = cfg.train.checkpoint_every;
    trainer.run_until(u64::MAX, |t, r| {
        if let Some(rel) = &r.relocation {
            if rel.moved > 0 {
                info!("iter {}: relocated {} primitives", r.iteration, rel.moved);
            }
        }
        if (log_every > 0 && r.iteration % log_every == 0) || t.is_done() {
            let line = t.progress_line(r);
            info!("{line}");
            writeln!(log, "{line}")
                .map_err(|e| ftgs_core::Error::io(log_path.display().to_string(), e))?;
        }
        if ckpt_every > 0 && r.iteration % ckpt_every == 0 && !t.is_done() {
            let p = out.join(format!("checkpoint_{:06}.ckpt", r.iteration));
            t.checkpoint(scene_ref.clone()).save(&p)?;
        }
        Ok(())
    })?;
    let final_path = out.join("final.ckpt");
    trainer.checkpoint(scene_ref).save(&final_path)?;
    info!("wrote {}", final_path.display());
    println!("{}", final_path.display());
    Ok(())
}

/// Raster settings stored in a training checkpoint, or the defaults used by
/// the synthetic generator.
fn checkpoint_raster(ckpt: &Checkpoint) -> RasterConfig {
    EngineConfig::from_json(&ckpt.config)
        .map(|c| c.raster_config())
        .unwrap_or_default()
}

fn resolve_scene(ckpt: &Checkpoint, ckpt_path: &Path, scene: Option<&Path>) -> Option<PathBuf> {
    if let Some(s) = scene {
        return Some(s.to_path_buf());
    }
    let recorded = PathBuf::from(ckpt.scene.as_ref()?);
    if recorded.is_file() {
        return Some(recorded);
    }
    let beside = ckpt_path.parent()?.join(&recorded);
    beside.is_file().then_some(beside)
}

fn render(
    ckpt_path: &Path,
    camera: Option<&str>,
    camera_json: Option<&str>,
    time: f64,
    scene: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&time) {
        return Err(usage(format!("--time {time} is outside [0, 1]")));
    }
    let ckpt = Checkpoint::load(ckpt_path)?;
    let scene_path = resolve_scene(&ckpt, ckpt_path, scene);
    let loaded = match &scene_path {
        Some(p) => Some(Scene::load(p)?),
        None => None,
    };
    let cam: Camera = match (camera, camera_json) {
        (_, Some(json)) => {
            let spec: CameraSpec =
                serde_json::from_str(json).map_err(|e| usage(format!("--camera-json: {e}")))?;
            spec.to_camera()?
        }
        (Some(id), None) => match &loaded {
            Some(s) => s.camera(id)?.clone(),
            None => {
                return Err(usage(format!(
                    "camera `{id}` needs a scene manifest; pass --scene or --camera-json"
                )))
            }
        },
        (None, None) => return Err(usage("pass --camera or --camera-json")),
    };
    let background = loaded.as_ref().map_or([0.0; 3], |s| s.manifest.background);
    let img = render_forward(&ckpt.set, &cam, time, background, &checkpoint_raster(&ckpt))?;
    save_png(out, &img.rgb)?;
    println!("{}", out.display());
    Ok(())
}

fn eval(ckpt_path: &Path, scene_path: &Path, split: &str, out: &Path) -> anyhow::Result<()> {
    let kind = match split {
        "test" => SplitKind::Test,
        "train" => SplitKind::Train,
        other => {
            return Err(usage(format!(
                "unknown split `{other}` (expected test or train)"
            )))
        }
    };
    let ckpt = Checkpoint::load(ckpt_path)?;
    let scene = Scene::load(scene_path)?;
    let data = Dataset::from_scene(&scene)?;
    let obs = data.split(kind);
    if obs.is_empty() {
        return Err(usage(format!(
            "the {split} split of {} has no frames",
            scene_path.display()
        )));
    }
    let report = evaluate(&ckpt.set, &data, obs, &checkpoint_raster(&ckpt))?;
    let mut f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    f.write_all(report.to_toml().as_bytes())
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{split}: {} frames, PSNR {:.3}, DSSIM1 {:.5}, DSSIM2 {:.5}",
        report.frames, report.psnr, report.dssim1, report.dssim2
    );
    if let Some(m) = &report.masked {
        println!(
            "{split} masked: {} frames, PSNR {:.3}, DSSIM1 {:.5}, DSSIM2 {:.5}",
            m.frames, m.psnr, m.dssim1, m.dssim2
        );
    }
    Ok(())
}
