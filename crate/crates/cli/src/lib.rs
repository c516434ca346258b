//! `wsr` command-line tool.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use wsr_core::camera::Camera;
use wsr_core::io::cameras::{load_camera_records, save_cameras, CameraRecord};
use wsr_core::io::{export_wsplat, load_ply, read_image, save_ply, write_image};
use wsr_core::metrics::{median, popping_metric, psnr, render_with, ssim, PoppingReport, RendererKind};
use wsr_core::render::{
    render_sorted_timed, render_wsr, render_wsr_timed, Image, Precision, RenderOptions, StageTimings,
};
use wsr_core::scene::{Scene, WeightKind, WeightModel};
use wsr_core::synth::{generate, Preset};
use wsr_core::train::gradcheck::DEFAULT_STEP;
use wsr_core::train::{finite_diff_check, train, train_from, Dataset, View};

pub use config::RunConfig;

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Worker-count override read from the environment.
pub const WORKERS_ENV: &str = "WSR_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "wsr", version, about = "Sort-free Gaussian splatting with weighted sum rendering")]
pub struct Cli {
    /// Worker threads for rendering and training.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a scene against posed images.
    Train(TrainArgs),
    /// Write one PNG per camera.
    Render(RenderArgs),
    /// Print PSNR and SSIM per view.
    Eval(EvalArgs),
    /// Write the binary viewer format.
    Export(ExportArgs),
    /// Time the rendering stages.
    Bench(BenchArgs),
    /// Frame-to-frame change along a camera path for both renderers.
    Popping(PoppingArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write a deterministic synthetic scene with cameras and images.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial scene: a PLY file, a preset name, or `random`.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Weight model for a random initial scene.
    #[arg(long)]
    pub model: Option<WeightKind>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Training log (JSON); defaults to `<out>.log.json`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: String,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "wsr")]
    pub renderer: RendererKind,
    #[arg(long, default_value = "f64")]
    pub precision: PrecisionArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: String,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "wsr")]
    pub renderer: RendererKind,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub scene: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scene: String,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long, default_value = "wsr")]
    pub renderer: RendererKind,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[arg(long, default_value = "f64")]
    pub precision: PrecisionArg,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoppingArgs {
    #[arg(long)]
    pub scene: String,
    /// Camera path in the cameras JSON format.
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// A PLY file or a preset name.
    #[arg(long, default_value = "toy20")]
    pub scene: String,
    /// Re-initialize the weight model to this kind before checking.
    #[arg(long)]
    pub model: Option<WeightKind>,
    /// Cameras JSON; the preset cameras are used when absent.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Target images; defaults to the render itself with a random
    /// per-channel shift.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
    /// Smallest per-channel shift between the default target and the
    /// render; shifts are drawn from `±[offset, 2 offset]`.
    #[arg(long, default_value_t = 0.05)]
    pub offset: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Full per-slot report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

/// Missing or contradictory arguments discovered after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `argv` (program name first), runs the subcommand, and returns
/// the process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.command {
        Command::Train(a) => match &a.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        },
        _ => RunConfig::default(),
    };
    let workers = resolve_workers(cli.workers, std::env::var(WORKERS_ENV).ok().as_deref(), config.workers)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker threads")?;
    pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(a, config),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Popping(a) => cmd_popping(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    })
}

/// Flag, then environment, then config file.
pub fn resolve_workers(flag: Option<usize>, env: Option<&str>, config: Option<usize>) -> anyhow::Result<Option<usize>> {
    let env = match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => Some(
            s.parse::<usize>()
                .map_err(|_| usage(format!("{WORKERS_ENV} must be a positive integer, got `{s}`")))?,
        ),
        None => None,
    };
    let n = flag.or(env).or(config);
    if n == Some(0) {
        return Err(usage("worker count must be at least 1"));
    }
    Ok(n)
}

pub(crate) fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

enum SceneSource {
    Random,
    Preset(Preset),
    Ply(PathBuf),
}

fn scene_source(arg: &str) -> SceneSource {
    if arg == "random" {
        SceneSource::Random
    } else if let Ok(p) = arg.parse::<Preset>() {
        SceneSource::Preset(p)
    } else {
        SceneSource::Ply(PathBuf::from(arg))
    }
}

fn load_scene(arg: &str) -> anyhow::Result<Scene> {
    match scene_source(arg) {
        SceneSource::Random => Err(usage("`random` is only accepted by train")),
        SceneSource::Preset(p) => Ok(generate(p)?.scene),
        SceneSource::Ply(path) => load_ply(&path).with_context(|| format!("loading scene {}", path.display())),
    }
}

/// Cameras with their ids from a cameras JSON file.
fn load_named_cameras(path: &Path) -> anyhow::Result<Vec<(String, Camera)>> {
    let records = load_camera_records(path).with_context(|| format!("loading cameras {}", path.display()))?;
    records
        .iter()
        .map(|r: &CameraRecord| Ok((r.id.to_string(), r.to_camera()?)))
        .collect()
}

/// `<dir>/<id>.png`, falling back to `.ppm`.
fn view_image(dir: &Path, id: &str) -> anyhow::Result<Image> {
    for ext in ["png", "ppm"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return read_image(&p).with_context(|| format!("reading {}", p.display()));
        }
    }
    bail!("no image for view `{id}` in {}", dir.display())
}

fn load_dataset(cameras: &Path, images: &Path) -> anyhow::Result<Dataset> {
    let views = load_named_cameras(cameras)?
        .into_iter()
        .map(|(id, camera)| {
            let image = view_image(images, &id)?;
            Ok(View { id, camera, image })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Dataset::new(views)?)
}

fn with_weight_model(mut scene: Scene, kind: Option<WeightKind>) -> Scene {
    if let Some(kind) = kind {
        if scene.weight_model.kind != kind {
            scene.weight_model = WeightModel::initial(kind);
        }
    }
    scene
}

fn cmd_train(a: TrainArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(m) = a.model {
        cfg.train.init.weight_model = m;
    }
    if let Some(n) = a.eval_interval {
        cfg.train.eval_interval = n;
    }
    let scene_arg = a.scene.or_else(|| cfg.paths.scene.as_ref().map(|p| p.display().to_string()));
    let cameras = a.cameras.or(cfg.paths.cameras.clone()).ok_or_else(|| usage("train needs --cameras"))?;
    let images = a.images.or(cfg.paths.images.clone()).ok_or_else(|| usage("train needs --images"))?;
    let out = a.out.or(cfg.paths.out.clone()).ok_or_else(|| usage("train needs --out"))?;
    let dataset = load_dataset(&cameras, &images)?;

    let t0 = Instant::now();
    let (scene, log) = match scene_arg.as_deref().map(scene_source) {
        None | Some(SceneSource::Random) => train(&dataset, &cfg.train)?,
        Some(SceneSource::Preset(p)) => train_from(generate(p)?.scene, &dataset, &cfg.train)?,
        Some(SceneSource::Ply(p)) => {
            let init = load_ply(&p).with_context(|| format!("loading scene {}", p.display()))?;
            train_from(with_weight_model(init, a.model), &dataset, &cfg.train)?
        }
    };
    let elapsed = t0.elapsed().as_secs_f64();
    save_ply(&scene, &out)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".log.json");
        PathBuf::from(s)
    });
    write_json(
        &log_path,
        &json!({ "config": cfg, "seconds": elapsed, "records": log.records }),
    )?;
    let last = log.records.last().expect("the initial record is always present");
    say!(
        "trained {} iterations in {:.1} s: psnr {:.2} dB, {} elements -> {}",
        last.iteration,
        elapsed,
        last.psnr,
        last.elements,
        out.display()
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> anyhow::Result<()> {
    let scene = load_scene(&a.scene)?;
    let opts = RenderOptions { precision: a.precision.into(), ..RenderOptions::default() };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let cameras = load_named_cameras(&a.cameras)?;
    for (id, cam) in &cameras {
        let img = render_with(a.renderer, &scene, cam, &opts)?;
        write_image(&a.out.join(format!("{id}.png")), &img)?;
    }
    say!("rendered {} views -> {}", cameras.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    view: String,
    psnr: f64,
    ssim: f64,
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let scene = load_scene(&a.scene)?;
    let dataset = load_dataset(&a.cameras, &a.images)?;
    let opts = RenderOptions::default();
    let mut rows = Vec::new();
    for v in &dataset.views {
        let img = render_with(a.renderer, &scene, &v.camera, &opts)?;
        rows.push(EvalRow { view: v.id.clone(), psnr: psnr(&img, &v.image)?, ssim: ssim(&img, &v.image)? });
    }
    let n = rows.len().max(1) as f64;
    let mean = EvalRow {
        view: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    say!("{:<12} {:>9} {:>8}", "view", "psnr", "ssim");
    for r in rows.iter().chain(std::iter::once(&mean)) {
        say!("{:<12} {:>9.3} {:>8.4}", r.view, r.psnr, r.ssim);
    }
    if let Some(p) = &a.json {
        write_json(p, &json!({ "renderer": a.renderer, "views": rows, "mean": mean }))?;
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> anyhow::Result<()> {
    let scene = load_scene(&a.scene)?;
    export_wsplat(&scene, &a.out)?;
    say!("exported {} elements -> {}", scene.len(), a.out.display());
    Ok(())
}

/// Median per-stage seconds over `repeat` passes through all cameras.
pub fn bench_report(
    scene: &Scene,
    cameras: &[Camera],
    renderer: RendererKind,
    repeat: usize,
    opts: &RenderOptions,
) -> anyhow::Result<serde_json::Value> {
    if repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let mut per_stage: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut totals = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let mut sum = StageTimings::default();
        let t0 = Instant::now();
        for cam in cameras {
            let (_, t) = match renderer {
                RendererKind::Wsr => render_wsr_timed(scene, cam, opts)?,
                RendererKind::Sorted => render_sorted_timed(scene, cam, opts)?,
            };
            sum.project_s += t.project_s;
            sum.rasterize_s += t.rasterize_s;
            if let Some(s) = t.sort_s {
                *sum.sort_s.get_or_insert(0.0) += s;
            }
        }
        totals.push(t0.elapsed().as_secs_f64());
        per_stage.entry("project").or_default().push(sum.project_s);
        if let Some(s) = sum.sort_s {
            per_stage.entry("sort").or_default().push(s);
        }
        per_stage.entry("rasterize").or_default().push(sum.rasterize_s);
    }
    let stages: BTreeMap<&str, f64> = per_stage.iter().map(|(k, v)| (*k, median(v))).collect();
    Ok(json!({
        "renderer": renderer,
        "precision": opts.precision,
        "elements": scene.len(),
        "views": cameras.len(),
        "repeat": repeat,
        "median_seconds": stages,
        "median_total_seconds": median(&totals),
    }))
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let scene = load_scene(&a.scene)?;
    let cameras: Vec<Camera> = load_named_cameras(&a.cameras)?.into_iter().map(|(_, c)| c).collect();
    let opts = RenderOptions { precision: a.precision.into(), ..RenderOptions::default() };
    let report = bench_report(&scene, &cameras, a.renderer, a.repeat, &opts)?;
    say!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PoppingSummary {
    wsr: PoppingReport,
    sorted: PoppingReport,
    wsr_median_delta: f64,
    sorted_median_delta: f64,
    /// Sorted max delta over its own median.
    sorted_spike_over_median: f64,
    /// Sorted max delta over the WSR max delta.
    sorted_spike_over_wsr_max: f64,
}

fn cmd_popping(a: PoppingArgs) -> anyhow::Result<()> {
    let scene = load_scene(&a.scene)?;
    let path: Vec<Camera> = load_named_cameras(&a.path)?.into_iter().map(|(_, c)| c).collect();
    let opts = RenderOptions::default();
    let wsr = popping_metric(&scene, &path, RendererKind::Wsr, &opts)?;
    let sorted = popping_metric(&scene, &path, RendererKind::Sorted, &opts)?;
    let summary = PoppingSummary {
        wsr_median_delta: wsr.median_delta(),
        sorted_median_delta: sorted.median_delta(),
        sorted_spike_over_median: sorted.max_delta / sorted.median_delta(),
        sorted_spike_over_wsr_max: sorted.max_delta / wsr.max_delta,
        wsr,
        sorted,
    };
    write_json(&a.out, &summary)?;
    say!(
        "sorted: max delta {:.4} at frame {} ({:.1}x median); wsr: max delta {:.4} ({:.1}x below the sorted spike)",
        summary.sorted.max_delta,
        summary.sorted.max_index,
        summary.sorted_spike_over_median,
        summary.wsr.max_delta,
        summary.sorted_spike_over_wsr_max
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let (scene, preset_cameras) = match scene_source(&a.scene) {
        SceneSource::Random => return Err(usage("`random` is only accepted by train")),
        SceneSource::Preset(p) => {
            let s = generate(p)?;
            (s.scene, s.cameras)
        }
        SceneSource::Ply(p) => (load_ply(&p).with_context(|| format!("loading scene {}", p.display()))?, Vec::new()),
    };
    let scene = with_weight_model(scene, a.model);
    let cameras: Vec<(String, Camera)> = match &a.cameras {
        Some(p) => load_named_cameras(p)?,
        None => preset_cameras.into_iter().enumerate().map(|(i, c)| (i.to_string(), c)).collect(),
    };
    if cameras.is_empty() {
        return Err(usage("gradcheck needs --cameras for a PLY scene"));
    }
    let (id, cam) = cameras
        .get(a.view)
        .ok_or_else(|| usage(format!("--view {} out of range ({} cameras)", a.view, cameras.len())))?;
    // Untruncated footprints keep the loss smooth for central differences.
    let opts = RenderOptions::exact();
    let target = match &a.images {
        Some(dir) => view_image(dir, id)?,
        None => {
            // Keeps every L1 residual well away from its kink.
            let mut img = render_wsr(&scene, cam, &opts)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            for p in &mut img.pixels {
                let shift = rng.random_range(a.offset..=2.0 * a.offset);
                *p += if rng.random_bool(0.5) { shift } else { -shift };
            }
            img
        }
    };
    let slots: Vec<usize> = (0..scene.param_count()).collect();
    let report = finite_diff_check(&scene, cam, &target, &slots, a.step, &opts, &Default::default())?;
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    let worst = report.worst.as_ref().map(|w| w.slot.as_str()).unwrap_or("-");
    say!(
        "{:?}: {} slots, max relative error {:.3e} at {worst}",
        scene.weight_model.kind,
        report.slots.len(),
        report.max_error
    );
    if !(report.max_error < GRADCHECK_TOLERANCE) {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_error);
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let s = generate(a.preset)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_ply(&s.scene, &a.out.join("scene.ply"))?;
    save_cameras(&a.out.join("cameras.json"), &s.cameras)?;
    for (i, img) in s.images.iter().enumerate() {
        write_image(&a.out.join("images").join(format!("{i}.png")), img)?;
    }
    if !s.path.is_empty() {
        save_cameras(&a.out.join("path.json"), &s.path)?;
    }
    say!(
        "{} elements, {} cameras, {} path frames -> {}",
        s.scene.len(),
        s.cameras.len(),
        s.path.len(),
        a.out.display()
    );
    Ok(())
}
