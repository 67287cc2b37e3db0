//! `recoat`: generate synthetic scenes, rasterize them, train, predict and evaluate.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when a command fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use recoat::datagen::{generate_dataset, read_dataset, read_scene, write_dataset, DatasetSpec};
use recoat::metrics::{evaluate, write_metrics_csv};
use recoat::net::NetConfig;
use recoat::predict::{eval_records, predict_all, read_predictions, write_predictions};
use recoat::raster::{export_image, image_file_name, rasterize, RasterConfig, RasterPalette};
use recoat::scene::{AgentType, Scene};
use recoat::train::{load_model, prepare_dataset, train, RunConfig, TrainConfig, TrainState, CONFIG_FILE};

#[derive(Debug, Parser)]
#[command(name = "recoat", version, about = "Multi-modal trajectory prediction on bird's-eye-view rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a dataset of scene files plus a manifest.
    Generate(GenerateArgs),
    /// Render scenes to PNG images in the target frame.
    Rasterize(RasterizeArgs),
    /// Train a model for one agent type, writing a checkpoint per epoch.
    Train(TrainArgs),
    /// Run a checkpoint over scenes and write a predictions file.
    Predict(PredictArgs),
    /// Score a predictions file against scenes and write a metrics CSV.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "vehicle")]
    agent_type: AgentType,
    /// Minimum initial speed, m/s (default depends on the agent type).
    #[arg(long, requires = "speed_max")]
    speed_min: Option<f64>,
    /// Maximum initial speed, m/s.
    #[arg(long, requires = "speed_min")]
    speed_max: Option<f64>,
    /// Standard deviation of the position noise on observed histories, meters.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct RasterizeArgs {
    /// A scene file or a dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Output directory; one PNG per scene, named after its scenario id.
    #[arg(long)]
    out: PathBuf,
    /// Palette file (JSON object of class name to RGB triple).
    #[arg(long)]
    palette: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, config and log.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration file (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total number of epochs, counting any already completed in a resumed checkpoint.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agent_type: Option<AgentType>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Continue from this checkpoint; its run directory must hold the matching config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to the one next to the checkpoint.
    #[arg(long)]
    run_config: Option<PathBuf>,
    /// A scene file or a dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Predictions file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    chunk: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions file written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// The scenes the predictions were made on.
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain on one line; library errors already embed their source, so repeats are dropped.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Rasterize(a) => rasterize_scenes(a),
        Command::Train(a) => train_model(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
    }
}

/// Scenes from either a single scene file or a dataset directory.
fn load_scenes(path: &Path) -> anyhow::Result<Vec<Scene>> {
    let scenes = if path.is_dir() { read_dataset(path)? } else { vec![read_scene(path)?] };
    if scenes.is_empty() {
        bail!("{}: no scenes", path.display());
    }
    Ok(scenes)
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut spec = DatasetSpec::new(a.count, a.seed);
    spec.agent_type = a.agent_type;
    spec.speed_range = recoat::datagen::default_speed_range(a.agent_type);
    if let (Some(lo), Some(hi)) = (a.speed_min, a.speed_max) {
        spec.speed_range = (lo, hi);
    }
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    let scenes = generate_dataset(&spec)?;
    let manifest = write_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", manifest.len(), a.out.display());
    Ok(())
}

fn rasterize_scenes(a: RasterizeArgs) -> anyhow::Result<()> {
    let mut cfg = RasterConfig::default();
    if let Some(p) = &a.palette {
        cfg.palette = RasterPalette::load(p)?;
    }
    let scenes = load_scenes(&a.input)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for s in &scenes {
        let local = s.to_target_frame()?;
        let img = rasterize(&local, s.target.agent_type, &cfg);
        export_image(&img, &a.out.join(image_file_name(&s.scenario_id)))?;
    }
    println!("wrote {} images to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_model(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.agent_type {
        cfg.agent_type = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if a.clip_norm.is_some() {
        cfg.clip_norm = a.clip_norm;
    }
    cfg.validate()?;

    let state = match &a.resume {
        Some(ckpt) => {
            let net_cfg = run_config_near(ckpt)?.net;
            if net_cfg.agent_type != cfg.agent_type {
                bail!("checkpoint model is for {} but training targets {}", net_cfg.agent_type, cfg.agent_type);
            }
            TrainState::load(ckpt, net_cfg)?
        }
        None => TrainState::fresh(&cfg, NetConfig::new(cfg.agent_type))?,
    };
    let scenes = load_scenes(&a.data)?;
    let data = prepare_dataset(&scenes, &state.net.config, &RasterConfig::default())?;
    if data.is_empty() {
        bail!("{}: no {} scenes", a.data.display(), cfg.agent_type);
    }
    let start = state.epoch;
    let out = train(&cfg, state, &data, Some(&a.out))?;
    println!(
        "trained {} {} epochs on {} scenes ({} checkpoints in {})",
        cfg.agent_type,
        out.state.epoch - start,
        data.len(),
        out.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn run_config_near(checkpoint: &Path) -> anyhow::Result<RunConfig> {
    let dir = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    RunConfig::load(dir).with_context(|| format!("no usable {CONFIG_FILE} next to {}", checkpoint.display()))
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let run = match &a.run_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RunConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => run_config_near(&a.checkpoint)?,
    };
    let net = load_model(&a.checkpoint, run.net)?;
    let scenes = load_scenes(&a.data)?;
    let inputs = prepare_dataset(&scenes, &net.config, &RasterConfig::default())?;
    if inputs.is_empty() {
        bail!("{}: no {} scenes", a.data.display(), net.config.agent_type);
    }
    let lines = predict_all(&net, &inputs, a.chunk)?;
    write_predictions(&a.out, &lines)?;
    println!("wrote {} predictions to {}", lines.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let scenes = load_scenes(&a.data)?;
    let records = eval_records(&preds, &scenes)?;
    let rows = evaluate(&records)?;
    write_metrics_csv(&a.out, &rows)?;
    for r in rows.iter().filter(|r| !r.metric.contains('@')) {
        println!("{:<12} {:.4}", r.metric, r.value);
    }
    Ok(())
}
