use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use ignition::bridge::{Bridge, BridgeConfig, Publisher, VizMessage};
use ignition::controller::{
    drive, shadow_accel_agreement, shadow_compare, write_trajectory_csv, ControlFrame, DriveConfig, Driver,
};
use ignition::dataset::{label_stats, synthesize, Dataset, Split, SplitMode, SynthConfig};
use ignition::model::{saliency, AccelClass, ModelBundle, ModelConfig, ModelMode, SaliencyTarget};
use ignition::oracle::OracleParams;
use ignition::render::{render, CameraParams, FrameSize};
use ignition::track::{load_track, Point, TrackSpec, DEFAULT_DS};
use ignition::trainer::{evaluate, train, MetricsSnapshot, TrainConfig, TrainOptions};
use ignition::vehicle::{CarParams, CarState};

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

const RESOLVED_CONFIG: &str = "resolved_config.json";
const DEFAULT_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "ignition", version, about = "Behavioral-cloning racing stack", arg_required_else_help = true)]
struct Cli {
    /// Worker threads for rendering and convolution (0 = all cores).
    #[arg(long, global = true, env = "IGNITION_THREADS")]
    threads: Option<usize>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drive the oracle around a track and write a labeled dataset.
    Synth(SynthArgs),
    /// Print label histograms and write stats.json next to the dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a driving model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Close the loop: drive a track with a model or the oracle.
    Drive(DriveArgs),
    /// Let the oracle drive while the model predicts on the same frames.
    Shadow(ShadowArgs),
    /// Render one frame to a binary PGM.
    Render(RenderArgs),
    /// Host the console websocket and static files.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimArgs {
    /// Bundled track name or path to a track JSON file.
    #[arg(long, default_value = "road_course")]
    track: String,
    /// Car parameters JSON (defaults otherwise).
    #[arg(long)]
    car: Option<PathBuf>,
    /// Oracle parameters JSON (defaults otherwise).
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Camera parameters JSON (defaults otherwise).
    #[arg(long)]
    camera: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Seconds of oracle driving (labels at 10 Hz).
    #[arg(long, default_value_t = 1000.0)]
    duration: f64,
    #[arg(long, default_value = "64x36")]
    size: String,
    #[arg(long, default_value = "random")]
    split_mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training configuration JSON; flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Overfit probe on the first N training records.
    #[arg(long)]
    overfit: Option<usize>,
    #[arg(long)]
    loader_threads: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stream progress to a console bridge on this port.
    #[arg(long)]
    bridge: Option<u16>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for evaluation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DriveArgs {
    /// Model checkpoint; without it the oracle drives.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    /// Run as fast as possible instead of at wall-clock pace.
    #[arg(long)]
    fast: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-control-step CSV log.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Stream frames to a console bridge on this port.
    #[arg(long)]
    bridge: Option<u16>,
}

#[derive(Args, Debug)]
struct ShadowArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    sim: SimArgs,
    /// 10 Hz frames to compare; the oracle drives at 100 Hz in between.
    #[arg(long, default_value_t = 1200)]
    steps: usize,
    /// CSV of per-frame predictions and oracle commands.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Arc length along the centerline, meters.
    #[arg(long, default_value_t = 0.0)]
    s: f64,
    /// Lateral offset from the centerline, meters (positive = left).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    offset: f64,
    /// Heading relative to the track tangent, degrees (positive = left).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    #[arg(long, default_value = "64x36")]
    size: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value_t = 8800)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory with the built console.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Replay a metrics.jsonl history to connected consoles.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Drive this checkpoint in a loop and stream its frames.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            let _ = e.print();
            return if matches!(e.kind(), DisplayHelp | DisplayVersion) { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = cli.threads.unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring thread pool")?;
    }
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Synth(a) => cmd_synth(a, seed, threads),
        Command::Stats { data } => cmd_stats(&data),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Drive(a) => cmd_drive(a, seed),
        Command::Shadow(a) => cmd_shadow(a, seed),
        Command::Render(a) => cmd_render(a, seed),
        Command::Serve(a) => cmd_serve(a, seed),
    }
}

struct Sim {
    track: TrackSpec,
    car: CarParams,
    oracle: OracleParams,
    camera: CameraParams,
}

impl SimArgs {
    fn load(&self) -> anyhow::Result<Sim> {
        let track = load_track(&self.track, DEFAULT_DS).with_context(|| format!("loading track {}", self.track))?;
        let car = self.car.as_ref().map(CarParams::load).transpose()?.unwrap_or_default();
        car.validate()?;
        let oracle = self.oracle.as_ref().map(OracleParams::load).transpose()?.unwrap_or_default();
        oracle.validate()?;
        let camera = match &self.camera {
            Some(p) => read_json::<CameraParams>(p)?,
            None => CameraParams::default(),
        };
        camera.validate()?;
        Ok(Sim { track, car, oracle, camera })
    }
}

impl Sim {
    fn describe(&self) -> serde_json::Value {
        json!({
            "track": { "name": self.track.name, "width": self.track.width, "total_length": self.track.total_length() },
            "car": self.car,
            "oracle": self.oracle,
            "camera": self.camera,
        })
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(dir: &Path, command: &str, config: serde_json::Value) -> anyhow::Result<()> {
    write_json(&dir.join(RESOLVED_CONFIG), &json!({ "command": command, "config": config }))
}

/// Directory holding a command's primary output file.
fn parent_dir(path: &Path) -> PathBuf {
    path.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn start_bridge(host: &str, port: u16, ui_dir: Option<PathBuf>) -> anyhow::Result<Bridge> {
    let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad bridge address {host}:{port}"))?;
    let bridge = Bridge::start(addr, BridgeConfig { ui_dir, ..Default::default() })?;
    eprintln!("console bridge on ws://{}/ws", bridge.local_addr());
    Ok(bridge)
}

fn cmd_synth(a: SynthArgs, seed: u64, threads: usize) -> anyhow::Result<()> {
    let sim = a.sim.load()?;
    let frame_size: FrameSize = a.size.parse()?;
    let split_mode: SplitMode = a.split_mode.parse()?;
    let config = SynthConfig { duration_s: a.duration, frame_size, seed, camera: sim.camera, split_mode, threads };
    let manifest = synthesize(&sim.track, &sim.car, &sim.oracle, &config, &a.out)?;
    let mut resolved = sim.describe();
    resolved["synth"] = serde_json::to_value(SynthConfig { threads: 0, ..config })?;
    write_resolved(&a.out, "synth", resolved)?;
    say!(
        "wrote {} records ({} train / {} val / {} test) of {} to {}",
        manifest.record_count,
        manifest.split_counts.train,
        manifest.split_counts.val,
        manifest.split_counts.test,
        frame_size,
        a.out.display()
    );
    Ok(())
}

fn cmd_stats(data: &Path) -> anyhow::Result<()> {
    let dataset = Dataset::load(data)?;
    let stats = label_stats(&dataset.records)?;
    say!("{}", stats.render_text().trim_end());
    write_json(&data.join("stats.json"), &stats)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let model = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig {
            input_width: dataset.manifest.frame_width,
            input_height: dataset.manifest.frame_height,
            ..Default::default()
        },
    };
    model.validate()?;
    let mut cfg = match &a.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(lr) = a.lr {
        match &mut cfg.optimizer {
            ignition::autodiff::OptimizerConfig::Adam(c) => c.lr = lr,
            ignition::autodiff::OptimizerConfig::Sgd(c) => c.lr = lr,
        }
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if a.overfit.is_some() {
        cfg.overfit_n = a.overfit;
    }
    if let Some(v) = a.loader_threads {
        cfg.loader_threads = v;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_resolved(
        &a.out,
        "train",
        json!({ "data": a.data, "dataset_seed": dataset.manifest.rng_seed, "model": model, "train": cfg, "resume": a.resume }),
    )?;

    let bridge = a.bridge.map(|p| start_bridge("127.0.0.1", p, None)).transpose()?;
    let publisher = bridge.as_ref().map(Bridge::publisher);
    let mut sink = |s: &MetricsSnapshot| {
        eprintln!("{}", s.to_json_line());
        if let Some(p) = &publisher {
            let _ = p.publish(VizMessage::train_progress(s));
        }
    };
    let options = TrainOptions { resume: a.resume.clone(), on_metrics: Some(&mut sink) };
    let report = train(&dataset, &model, &cfg, &a.out, options)?;
    let summary = json!({
        "steps": report.steps,
        "best_val_loss": report.best_val_loss,
        "best_checkpoint": report.best_checkpoint,
        "final_checkpoint": report.final_checkpoint,
        "overfit": report.overfit.as_ref().map(|o| json!({
            "records": o.records,
            "steps": o.steps,
            "perfect_at_step": o.perfect_at_step,
            "plateau_loss": o.plateau_loss,
            "plateau_loss_rescaled": o.plateau_loss_rescaled,
        })),
    });
    say!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(b) = bridge {
        b.shutdown();
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let split: Split = a.split.parse()?;
    let result = evaluate(&a.ckpt, &dataset, split)?;
    say!("{}", serde_json::to_string_pretty(&result)?);
    if let Some(dir) = &a.out {
        write_json(&dir.join("evaluation.json"), &result)?;
        write_resolved(dir, "evaluate", json!({ "ckpt": a.ckpt, "data": a.data, "split": split }))?;
    }
    Ok(())
}

/// Publishes control frames to a console, with throttle saliency for
/// classification models.
fn frame_streamer<'a>(publisher: Publisher, bundle: Option<&'a ModelBundle>) -> impl FnMut(&ControlFrame) + 'a {
    move |f: &ControlFrame| {
        let sal = bundle.filter(|b| b.model.config().mode == ModelMode::Classification).and_then(|b| {
            saliency(
                &b.model,
                &f.frame,
                &b.normalization,
                f.state.speed_mph() as f32,
                SaliencyTarget::Accel(AccelClass::Throttle),
            )
            .ok()
        });
        let _ = publisher.publish(VizMessage::from_control_frame(f, sal.as_ref()));
    }
}

fn cmd_drive(a: DriveArgs, seed: u64) -> anyhow::Result<()> {
    let sim = a.sim.load()?;
    let bundle = a.ckpt.as_ref().map(ModelBundle::load).transpose()?;
    let driver = match &bundle {
        Some(b) => Driver::Model(b),
        None => Driver::Oracle,
    };
    let config = DriveConfig { duration_s: a.duration, seed, camera: sim.camera, realtime: !a.fast, ..Default::default() };
    let bridge = a.bridge.map(|p| start_bridge("127.0.0.1", p, None)).transpose()?;
    let mut stream = bridge.as_ref().map(|b| frame_streamer(b.publisher(), bundle.as_ref()));
    let on_frame = stream.as_mut().map(|s| s as &mut dyn FnMut(&ControlFrame));
    let outcome = drive(driver, &sim.track, &sim.car, &sim.oracle, &config, on_frame)?;
    drop(stream);
    if let Some(p) = &a.report {
        write_json(p, &outcome.report)?;
    }
    if let Some(p) = &a.trajectory {
        write_trajectory_csv(&outcome.trajectory, p)?;
    }
    if let Some(dir) = a.report.as_deref().or(a.trajectory.as_deref()).map(parent_dir) {
        let mut resolved = sim.describe();
        resolved["ckpt"] = json!(a.ckpt);
        resolved["drive"] = json!({ "duration_s": config.duration_s, "seed": seed, "realtime": config.realtime });
        write_resolved(&dir, "drive", resolved)?;
    }
    say!("{}", serde_json::to_string_pretty(&outcome.report)?);
    if let Some(b) = bridge {
        b.shutdown();
    }
    Ok(())
}

fn cmd_shadow(a: ShadowArgs, seed: u64) -> anyhow::Result<()> {
    let sim = a.sim.load()?;
    let bundle = ModelBundle::load(&a.ckpt)?;
    let rows = shadow_compare(&bundle, &sim.track, &sim.car, &sim.oracle, a.steps, seed, &sim.camera, None)?;
    let within = rows
        .iter()
        .filter(|r| (r.prediction.command.steer_deg - r.oracle.steer_deg).abs() <= ignition::trainer::STEER_TOLERANCE_DEG)
        .count() as f64
        / rows.len().max(1) as f64;
    say!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "frames": rows.len(),
            "accel_agreement": shadow_accel_agreement(&rows),
            "steer_agreement_within_20deg": within,
        }))?
    );
    if let Some(path) = &a.out {
        let mut csv = String::from("frame_id,speed_mph,pred_steer_deg,pred_throttle,pred_brake,oracle_steer_deg,oracle_throttle,oracle_brake\n");
        for r in &rows {
            let (p, o) = (&r.prediction.command, &r.oracle);
            csv.push_str(&format!(
                "{},{:.4},{:.4},{},{},{:.4},{},{}\n",
                r.frame_id, r.speed_mph, p.steer_deg, p.throttle, p.brake, o.steer_deg, o.throttle, o.brake
            ));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        let mut resolved = sim.describe();
        resolved["ckpt"] = json!(a.ckpt);
        resolved["shadow"] = json!({ "steps": a.steps, "seed": seed });
        write_resolved(&parent_dir(path), "shadow", resolved)?;
    }
    Ok(())
}

fn cmd_render(a: RenderArgs, seed: u64) -> anyhow::Result<()> {
    let sim = a.sim.load()?;
    let size: FrameSize = a.size.parse()?;
    let k = sim.track.sample_index_at(a.s);
    let tangent = sim.track.tangent(k);
    let c = sim.track.sample(k);
    let position = Point::new(c.x - a.offset * tangent.sin(), c.y + a.offset * tangent.cos());
    let state = CarState::at_rest(position, tangent + a.yaw.to_radians());
    let frame = render(&sim.track, &state, &sim.camera, size, seed)?;
    frame.write_pgm(&a.out)?;
    let mut resolved = sim.describe();
    resolved["render"] = json!({ "s": a.s, "offset": a.offset, "yaw_deg": a.yaw, "size": size, "seed": seed });
    write_resolved(&parent_dir(&a.out), "render", resolved)?;
    say!("wrote {} ({size}, horizon row {})", a.out.display(), sim.camera.horizon_row(size));
    Ok(())
}

fn cmd_serve(a: ServeArgs, seed: u64) -> anyhow::Result<()> {
    if let Some(dir) = &a.ui_dir {
        if !dir.is_dir() {
            bail!("ui directory {} does not exist", dir.display());
        }
    }
    let bridge = start_bridge(&a.host, a.port, a.ui_dir.clone())?;
    if let Some(path) = &a.replay {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let s: MetricsSnapshot = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            bridge.publish_metrics(&s)?;
            std::thread::sleep(Duration::from_millis(50));
        }
    }
    if let Some(ckpt) = &a.ckpt {
        let sim = a.sim.load()?;
        let bundle = ModelBundle::load(ckpt)?;
        let mut stream = frame_streamer(bridge.publisher(), Some(&bundle));
        for lap in 0u64.. {
            let config = DriveConfig { seed: ignition::seed::derive_seed(seed, &format!("serve/{lap}")), camera: sim.camera, realtime: true, ..Default::default() };
            let outcome = drive(Driver::Model(&bundle), &sim.track, &sim.car, &sim.oracle, &config, Some(&mut stream))?;
            eprintln!("{}", serde_json::to_string(&outcome.report)?);
        }
    }
    loop {
        std::thread::park();
    }
}
