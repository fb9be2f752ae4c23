use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use flowdepth::dataset::Dataset;
use flowdepth::eval::{self, DepthMetrics, EvalConfig, Region};
use flowdepth::geometry::Pixel;
use flowdepth::io::{self, CheckpointMeta};
use flowdepth::losses::LossWeights;
use flowdepth::parallel::Execution;
use flowdepth::sceneflow::NetConfig;
use flowdepth::synthetic::{CubeScene, CubeSceneSpec};
use flowdepth::trainer::{Mode, TrainConfig, TrainState, Trainer};
use flowdepth::Error;

use crate::run::{self, checkpoint_name, Artifacts, RunLock, RunManifest};

#[derive(Parser)]
#[command(name = "flowdepth", version, about = "Joint video depth and scene-flow optimization")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the moving-cube dataset.
    GenCube(GenCubeArgs),
    /// Optimize depth and scene flow on a dataset.
    Train(TrainArgs),
    /// Depth metrics of a run against a dataset's ground truth.
    Eval(EvalArgs),
    /// Write a point cloud, x-t slice or projected scene flow.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenCubeArgs {
    /// Scene description (JSON); missing fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    #[value(alias = "analytic_baseline")]
    AnalyticBaseline,
    #[value(alias = "no_prior")]
    NoPrior,
    #[value(alias = "static_mask")]
    StaticMask,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Full => Mode::Full,
            ModeArg::AnalyticBaseline => Mode::AnalyticBaseline,
            ModeArg::NoPrior => Mode::NoPrior,
            ModeArg::StaticMask => Mode::StaticMask,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    All,
    Static,
    Dynamic,
}

impl From<RegionArg> for Region {
    fn from(r: RegionArg) -> Region {
        match r {
            RegionArg::All => Region::All,
            RegionArg::Static => Region::Static,
            RegionArg::Dynamic => Region::Dynamic,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
    /// Total epochs, warm-up included.
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Static-region weight; defaults to 100 in static_mask mode.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = TrainConfig::default().lr_depth)]
    lr_depth: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_sceneflow: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    unnormalized_losses: bool,
    #[arg(long, default_value_t = NetConfig::default().bands)]
    bands: usize,
    #[arg(long, default_value_t = NetConfig::default().hidden_layers)]
    hidden_layers: usize,
    #[arg(long, default_value_t = NetConfig::default().hidden_width)]
    hidden_width: usize,
    /// Continue from the run's manifest and last checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Dataset holding ground-truth depth (and masks for region splits).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    region: RegionArg,
    #[arg(long, default_value_t = eval::DEFAULT_CUTOFF)]
    cutoff: f64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Pointcloud,
    #[value(alias = "xt_slice")]
    XtSlice,
    Sceneflow,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Dataset providing the cameras.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    kind: ExportKind,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Row for x-t slices; defaults to the middle row.
    #[arg(long)]
    row: Option<usize>,
    /// Output file. Slices ending in `.pgm` are written as 8-bit images.
    #[arg(long)]
    out: PathBuf,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCube(a) => gen_cube(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Export(a) => export(a),
    }
}

fn gen_cube(a: GenCubeArgs) -> Result<()> {
    let mut spec: CubeSceneSpec = match &a.spec {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?,
        None => CubeSceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let scene = CubeScene::generate(&spec)?;
    Dataset::from_scene(&scene).write(&a.out)?;
    let mut echo = serde_json::to_string_pretty(&spec)?;
    echo.push('\n');
    fs::write(a.out.join("spec.json"), echo)?;
    println!("wrote {} frames to {}", spec.frames, a.out.display());
    Ok(())
}

fn load_dataset(dir: &Path, exec: Execution) -> Result<flowdepth::sequence::Sequence> {
    let ds = Dataset::read(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(ds.into_sequence(exec)?)
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mode: Mode = a.mode.into();
    let gamma = a
        .gamma
        .unwrap_or(if mode == Mode::StaticMask { LossWeights::STATIC_GAMMA } else { 0.0 });
    TrainConfig {
        warmup_epochs: a.warmup_epochs.min(a.epochs),
        total_epochs: a.epochs,
        lr_depth: a.lr_depth,
        lr_sceneflow: a.lr_sceneflow,
        weights: LossWeights {
            alpha: a.alpha,
            beta: a.beta,
            gamma,
        },
        mode,
        seed: a.seed,
        normalize: !a.unnormalized_losses,
        net: NetConfig {
            bands: a.bands,
            hidden_layers: a.hidden_layers,
            hidden_width: a.hidden_width,
        },
        ..Default::default()
    }
}

fn meta(state: &TrainState, seq: &flowdepth::sequence::Sequence) -> CheckpointMeta {
    CheckpointMeta {
        epoch: state.epoch,
        num_frames: seq.num_frames(),
        width: seq.width(),
        height: seq.height(),
        encoding: state.net.as_ref().map(|n| n.encoding.clone()),
        net: state.net.as_ref().map(|n| n.config),
    }
}

fn write_epoch(out: &Path, state: &TrainState, seq: &flowdepth::sequence::Sequence, logged: &mut usize) -> Result<String> {
    let ck = checkpoint_name(state.epoch);
    io::write_checkpoint(&out.join(&ck), &state.store, &meta(state, seq))?;
    let ddir = out.join("depth");
    fs::create_dir_all(&ddir)?;
    for (i, d) in state.depth_maps().iter().enumerate() {
        io::write_pfm(&ddir.join(flowdepth::dataset::frame_file(i)), d)?;
    }
    let mut rows = String::new();
    for r in &state.history[*logged..] {
        rows.push_str(&io::loss_log_row(r.step, r.epoch, &r.loss));
        rows.push('\n');
    }
    *logged = state.history.len();
    use std::io::Write;
    fs::OpenOptions::new()
        .append(true)
        .open(out.join(run::LOSS_LOG))?
        .write_all(rows.as_bytes())?;
    Ok(ck)
}

fn train(a: TrainArgs) -> Result<()> {
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let seq = load_dataset(&a.dataset, exec)?;
    let _lock = RunLock::acquire(&a.out)?;
    fs::create_dir_all(a.out.join("checkpoints"))?;

    let (config, mut state) = if a.resume {
        let m = RunManifest::load(&a.out)?;
        let loaded = run::load_checkpoint(&a.out.join(&m.artifacts.checkpoint))?;
        let mut state = TrainState::init(&seq, &m.config)?;
        state.store = loaded.store;
        state.depths = loaded.depths;
        state.net = loaded.net;
        state.epoch = m.epoch;
        state.step = m.step;
        (m.config, state)
    } else {
        let config = train_config(&a);
        let state = TrainState::init(&seq, &config)?;
        fs::write(a.out.join(run::LOSS_LOG), format!("{}\n", io::LOSS_LOG_HEADER))?;
        (config, state)
    };
    let trainer = Trainer::new(&seq, config.clone())?.with_execution(exec);

    let mut manifest = RunManifest {
        config: config.clone(),
        seed: config.seed,
        dataset: a.dataset.clone(),
        epoch: state.epoch,
        step: state.step,
        artifacts: Artifacts {
            checkpoint: String::new(),
            losses: run::LOSS_LOG.into(),
            depth_dir: "depth".into(),
        },
    };
    let mut logged = 0;
    manifest.artifacts.checkpoint = write_epoch(&a.out, &state, &seq, &mut logged)?;
    manifest.save(&a.out)?;

    let out = a.out.clone();
    trainer.run(&mut state, |s| {
        let ck = write_epoch(&out, s, &seq, &mut logged).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        manifest.epoch = s.epoch;
        manifest.step = s.step;
        manifest.artifacts.checkpoint = ck;
        manifest
            .save(&out)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let last = s.history.last().map(|r| r.loss.total).unwrap_or(0.0);
        eprintln!("epoch {}/{} loss {last:.6}", s.epoch, config.total_epochs);
        Ok(())
    })?;
    if state.skipped_steps > 0 || state.nonfinite_events > 0 {
        eprintln!(
            "warning: {} steps skipped, {} non-finite events",
            state.skipped_steps, state.nonfinite_events
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    selected: Region,
    metrics: DepthMetrics,
    all: DepthMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    r#static: Option<DepthMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dynamic: Option<DepthMetrics>,
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let m = RunManifest::load(&a.run)?;
    let loaded = run::load_checkpoint(&a.run.join(&m.artifacts.checkpoint))?;
    let ds = Dataset::read(&a.dataset)?;
    let gt = ds.gt_depth.as_ref().ok_or_else(|| Error::Format {
        path: a.dataset.join("gt_depth"),
        msg: "dataset has no ground-truth depth".into(),
    })?;
    let pred: Vec<_> = (0..loaded.depths.num_frames())
        .map(|f| loaded.depths.depth_map(&loaded.store, f))
        .collect();
    let masks = ds.motion_masks.as_deref();
    let cfg = |region| EvalConfig {
        cutoff: a.cutoff,
        region,
        scale: 1.0,
    };
    let selected: Region = a.region.into();
    let metrics = eval::metrics(&pred, gt, masks, &cfg(selected))?;
    let split = |r| masks.map(|_| eval::metrics(&pred, gt, masks, &cfg(r))).transpose();
    let report = EvalReport {
        selected,
        metrics,
        all: eval::metrics(&pred, gt, masks, &cfg(Region::All))?,
        r#static: split(Region::Static).ok().flatten(),
        dynamic: split(Region::Dynamic).ok().flatten(),
    };
    let mut s = serde_json::to_string_pretty(&report)?;
    s.push('\n');
    print!("{s}");
    if let Some(p) = &a.out {
        fs::write(p, &s)?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let m = RunManifest::load(&a.run)?;
    let loaded = run::load_checkpoint(&a.run.join(&m.artifacts.checkpoint))?;
    let seq = load_dataset(&a.dataset, Execution::default())?;
    if loaded.meta.num_frames != seq.num_frames() {
        bail!(Error::Structural("run and dataset disagree on the frame count".into()));
    }
    if a.frame >= seq.num_frames() {
        bail!(Error::Domain(format!("frame {} out of range", a.frame)));
    }
    match a.kind {
        ExportKind::Pointcloud => {
            let f = &seq.frames[a.frame];
            let d = loaded.depths.depth_map(&loaded.store, a.frame);
            let mut pts = Vec::new();
            for y in 0..d.height() {
                for x in 0..d.width() {
                    let z = d.get(x, y);
                    if z.is_finite() && z > 0.0 {
                        let p = f.unproject(Pixel::new(x as f64, y as f64), z)?;
                        pts.push([p.x, p.y, p.z]);
                    }
                }
            }
            io::write_ply(&a.out, &pts)?;
        }
        ExportKind::XtSlice => {
            let maps: Vec<_> = (0..seq.num_frames())
                .map(|f| loaded.depths.depth_map(&loaded.store, f))
                .collect();
            let row = a.row.unwrap_or(seq.height() / 2);
            let s = eval::xt_slice(&maps, row)?;
            if a.out.extension().is_some_and(|e| e == "pgm") {
                io::write_pgm_normalized(&a.out, &s)?;
            } else {
                io::write_pfm(&a.out, &s)?;
            }
        }
        ExportKind::Sceneflow => {
            let net = loaded
                .net
                .as_ref()
                .ok_or_else(|| Error::Config("run has no scene-flow network".into()))?;
            let (flow, _) = eval::project_scene_flow(net, &loaded.store, &loaded.depths, &seq.frames, a.frame)?;
            io::write_flo(&a.out, &flow)?;
        }
    }
    Ok(())
}
