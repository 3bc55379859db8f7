//! The `gs3` command-line tool.

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gs3_core::relight::render_request;
use gs3_core::toy::generate_toy_dataset;
use gs3_core::{metrics, EnvironmentMap, Exec, RenderToggles, SceneBounds, ToyConfig, ToyKind, TrainConfig, Trainer};
use serde::Deserialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::dumps::write_loss_log;
use crate::image_io::{load_image, save_image};
use crate::manifest::{load_dataset, save_manifest, BoundsSpec, DatasetManifest, Intrinsics, ManifestFrame, Pose, PoseConvention};
use crate::protocol::{CameraSpec, LightSpec, SceneContext, StateMessage};
use crate::serve::{spawn_server, threads_from_env, AppState, ModelRenderer};

pub const CHECKPOINT_FILE: &str = "checkpoint.gs3c";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Parser)]
#[command(name = "gs3", version, about = "Relightable Gaussian splatting: train, render, evaluate and serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a dataset manifest.
    Train(TrainArgs),
    /// Render one image from a checkpoint.
    Render(RenderArgs),
    /// PSNR and SSIM of a checkpoint against every frame of a manifest.
    Eval(EvalArgs),
    /// Write a synthetic toy dataset.
    Gen(GenArgs),
    /// Stream frames over WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of shared angular Gaussian lobes (1, 2, 4, 8 or 16).
    #[arg(long)]
    pub basis: Option<usize>,
    /// Total iterations; the stage split and decay milestones scale along.
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_shadow_splat: bool,
    #[arg(long)]
    pub no_phi: bool,
    #[arg(long)]
    pub no_psi: bool,
    /// Full training configuration (JSON); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Camera as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub camera: String,
    /// Light as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub light: String,
    /// Output image (.png, or .gs3i for raw floats).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    pub exposure: f64,
    /// Extra environment map (equirectangular image), named after its file stem.
    #[arg(long)]
    pub env: Vec<PathBuf>,
    #[arg(long)]
    pub no_shadow_splat: bool,
    #[arg(long)]
    pub no_phi: bool,
    #[arg(long)]
    pub no_psi: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV with one row per frame and a final `mean` row.
    #[arg(long)]
    pub metrics: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// diffuse-sphere, glossy-sphere or occluder-pair.
    #[arg(long)]
    pub kind: ToyKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub views: usize,
    #[arg(long, default_value_t = 50)]
    pub lights: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store images as raw floats (.gs3i) instead of 8-bit PNG.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Extra environment map (equirectangular image), named after its file stem.
    #[arg(long)]
    pub env: Vec<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success or help, 2 on usage errors,
/// 1 on runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

pub fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Gen(a) => gen(a),
        Command::Serve(a) => serve(a),
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>, rayon::ThreadPoolBuildError> {
    match threads_from_env() {
        Some(n) if n > 1 => rayon::ThreadPoolBuilder::new().num_threads(n).build().map(Some),
        _ => Ok(None),
    }
}

fn train(a: TrainArgs) -> CliResult {
    let (manifest, dataset) = load_dataset(&a.data)?;
    let mut config = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iters {
        config = config.scaled_to(n);
    }
    if let Some(j) = a.basis {
        config.basis_count = j;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.toggles.shadow_splat &= !a.no_shadow_splat;
    config.toggles.phi &= !a.no_phi;
    config.toggles.psi &= !a.no_psi;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;

    let pool = thread_pool()?;
    let exec = if pool.is_some() { Exec::Parallel } else { Exec::Serial };
    let mut trainer = Trainer::new(dataset, config.clone(), exec)?;
    let total = config.total_iters;
    let every = (total / 20).max(1);
    eprintln!("training on {} views, {} iterations, {} initial gaussians", trainer.dataset.views.len(), total, trainer.model.cloud.len());
    let mut progress = |r: &gs3_core::LossRecord| {
        if (r.iter + 1).is_multiple_of(every) || r.iter + 1 == total {
            eprintln!("iter {:>7}/{total} stage {} loss {:.5} l1 {:.5} gaussians {}", r.iter + 1, r.stage, r.loss, r.l1, r.num_gaussians);
        }
    };
    let log = match &pool {
        Some(p) => p.install(|| trainer.run(&mut progress)),
        None => trainer.run(&mut progress),
    }?;

    let meta = CheckpointMeta { iteration: trainer.iteration as u32, config, normalization: Some(BoundsSpec::from(manifest.normalization())) };
    let ckpt = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer.model, &meta, &ckpt)?;
    write_loss_log(&log, &a.out.join(LOSS_FILE))?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

/// Inline JSON when the argument looks like an object, otherwise a file.
fn json_arg<T: for<'de> Deserialize<'de>>(arg: &str, what: &str) -> Result<T, String> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| format!("{what} {arg}: {e}"))?
    };
    serde_json::from_str(&text).map_err(|e| format!("{what}: {e}"))
}

fn scene_context(meta: &CheckpointMeta, env: &[PathBuf]) -> Result<SceneContext, Box<dyn std::error::Error>> {
    let mut ctx = SceneContext::new(meta.normalization.map(SceneBounds::from).unwrap_or(SceneBounds::UNIT));
    for p in env {
        let name = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| format!("{}: no file name", p.display()))?;
        ctx.env_maps.insert(name.to_string(), EnvironmentMap::from_image(&load_image(p)?)?);
    }
    Ok(ctx)
}

fn render(a: RenderArgs) -> CliResult {
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let mut camera: CameraSpec = json_arg(&a.camera, "camera")?;
    if a.width.is_some() || a.height.is_some() {
        let (w, h) = match (a.width, a.height, camera.width, camera.height) {
            (Some(w), Some(h), ..) => (w, h),
            (Some(w), None, Some(cw), Some(ch)) => (w, (w as f64 * ch as f64 / cw as f64).round() as u32),
            (None, Some(h), Some(cw), Some(ch)) => ((h as f64 * cw as f64 / ch as f64).round() as u32, h),
            _ => return Err("--width and --height must be given together unless the camera has a resolution".into()),
        };
        camera = match (camera.width, camera.height) {
            (Some(_), Some(_)) => {
                let f = camera.to_frame(None)?.resized(w, h);
                CameraSpec {
                    fx: Some(f.fx),
                    fy: Some(f.fy),
                    cx: Some(f.cx),
                    cy: Some(f.cy),
                    width: Some(w),
                    height: Some(h),
                    ..camera
                }
            }
            _ => CameraSpec { width: Some(w), height: Some(h), ..camera },
        };
    }
    let light: LightSpec = json_arg(&a.light, "light")?;
    let trained = meta.config.toggles;
    let toggles = RenderToggles {
        phi: trained.phi && !a.no_phi,
        psi: trained.psi && !a.no_psi,
        shadow: trained.shadow_splat && !a.no_shadow_splat,
    };
    let state = StateMessage { seq: None, camera, light, toggles, quality: None, format: Default::default(), exposure: a.exposure };
    let request = scene_context(&meta, &a.env)?.request(&state)?;
    let img = match thread_pool()? {
        Some(p) => p.install(|| render_request(&model, &request, Exec::Parallel)),
        None => render_request(&model, &request, Exec::Serial),
    }?;
    save_image(&img, &a.out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let (manifest, dataset) = load_dataset(&a.data)?;
    let toggles = meta.config.toggles;
    let mut w = csv::Writer::from_path(&a.metrics).map_err(|e| format!("{}: {e}", a.metrics.display()))?;
    w.write_record(["frame", "image", "psnr", "ssim"])?;
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, (view, frame)) in dataset.views.iter().zip(&manifest.frames).enumerate() {
        let img = gs3_core::render_frame(&model, &view.camera, &view.light, toggles, Exec::Serial)?.clamped();
        let p = metrics::psnr(&img, &view.target)?;
        let s = metrics::ssim(&img, &view.target)?;
        psnr_sum += p;
        ssim_sum += s;
        w.write_record([i.to_string(), frame.image_path.clone(), format!("{p:.6}"), format!("{s:.6}")])?;
    }
    let n = dataset.views.len() as f64;
    w.write_record(["mean".to_string(), String::new(), format!("{:.6}", psnr_sum / n), format!("{:.6}", ssim_sum / n)])?;
    w.flush()?;
    eprintln!("mean psnr {:.3} dB, mean ssim {:.4} over {} frames", psnr_sum / n, ssim_sum / n, dataset.views.len());
    Ok(())
}

fn gen(a: GenArgs) -> CliResult {
    let cfg = ToyConfig { kind: a.kind, n_views: a.views, n_lights: a.lights, resolution: a.resolution, seed: a.seed };
    let data = generate_toy_dataset(&cfg)?;
    let images = a.out.join("images");
    fs::create_dir_all(&images).map_err(|e| format!("{}: {e}", images.display()))?;
    let ext = if a.raw { "gs3i" } else { "png" };
    let mut frames = Vec::with_capacity(data.views.len());
    for (i, v) in data.views.iter().enumerate() {
        let rel = format!("images/{i:03}.{ext}");
        save_image(&v.image, &a.out.join(&rel))?;
        frames.push(ManifestFrame { image_path: rel, camera_to_world: Pose::from_frame(&v.camera, PoseConvention::OpenGl), light: v.light });
    }
    let c = &data.views[0].camera;
    let manifest = DatasetManifest {
        intrinsics: Intrinsics { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height },
        convention: PoseConvention::OpenGl,
        frames,
        scene_scale: None,
        scene_bounds: Some(data.bounds.into()),
        seed_points: data.seed_points.iter().map(|p| p.to_array()).collect(),
    };
    let path = a.out.join("manifest.json");
    save_manifest(&manifest, &path)?;
    eprintln!("wrote {} frames to {}", manifest.frames.len(), path.display());
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let context = scene_context(&meta, &a.env)?;
    let renderer = ModelRenderer::new(model, threads_from_env())?;
    let state = AppState::new(renderer, context);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let (addr, handle) = spawn_server(SocketAddr::new(a.host, a.port), state).await?;
        eprintln!("serving {} on http://{addr} (WebSocket at / and /ws)", a.ckpt.display());
        handle.await.map_err(std::io::Error::other)?
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(run(["gs3", "--help"]), 0);
        assert_eq!(run(["gs3", "train", "--help"]), 0);
        assert_eq!(run(["gs3", "frobnicate"]), 2);
        assert_eq!(run(["gs3", "train", "--data"]), 2);
        assert_eq!(run(["gs3", "gen", "--kind", "teapot", "--out", "x"]), 2);
    }

    #[test]
    fn missing_files_are_runtime_errors() {
        assert_eq!(run(["gs3", "eval", "--ckpt", "/nonexistent/a.gs3c", "--data", "/nonexistent/m.json", "--metrics", "/tmp/x.csv"]), 1);
    }

    #[test]
    fn json_args_accept_inline_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("light.json");
        fs::write(&p, r#"{"kind": "directional", "direction": [0, 2, 0]}"#).unwrap();
        let l: LightSpec = json_arg(p.to_str().unwrap(), "light").unwrap();
        let inline: LightSpec = json_arg(r#"{"kind": "directional", "direction": [0, 2, 0]}"#, "light").unwrap();
        assert_eq!(l, inline);
        assert!(json_arg::<LightSpec>("{", "light").is_err());
    }
}
