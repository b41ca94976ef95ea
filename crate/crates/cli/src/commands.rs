use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;

use occugrasp::config::{describe_keys, parse_pairs, RunConfig, SEED_ENV};
use occugrasp::data::{generate_sample, load_dataset, save_sample, scene_seed, ObservationConfig};
use occugrasp::eval::{bench_strategies, evaluate, metrics_csv, strategies_csv, EvalConfig, Strategy};
use occugrasp::io::{read_ckpt1, read_pcb1, write_ckpt1, write_occ1, Checkpoint};
use occugrasp::model::{InferOptions, Model, QueryMode, DENSE_CELLS};
use occugrasp::nn::AdamState;
use occugrasp::occupancy::region_to_grid;
use occugrasp::pointcloud::sample_fixed_indices;
use occugrasp::rng::{self, streams};
use occugrasp::scene::OccupancyGrid;
use occugrasp::train::{train as run_training, TrainScene, TrainState};
use occugrasp::triplane::OpCounters;
use occugrasp::Error;

/// Attaches a process exit code to an error.
#[derive(Debug)]
pub struct Coded(pub u8, pub String);

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Coded {}

fn coded(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Coded(code, msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(c) = e.downcast_ref::<Coded>() {
        return c.0;
    }
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.0;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => 2,
                Error::Io(_) | Error::Format { .. } => 3,
                Error::Diverged(_) => 4,
                Error::ArchitectureMismatch { .. } => 5,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Config file plus overrides shared by the model-facing commands.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file; omitted keys take documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (`key=value`); repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; wins over the config file, then OCCUGRASP_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Resolves the configuration; `fallback` is read when no `--config` is
    /// given and it exists.
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let path = self.config.clone().or_else(|| fallback.filter(|p| p.exists()).map(Path::to_path_buf));
        let text = match &path {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut pairs = parse_pairs(&text).map_err(|e| coded(2, format!("{e}\n{}", describe_keys())))?;
        for s in &self.sets {
            let one = parse_pairs(s).map_err(|e| coded(2, format!("--set {s}: {e}")))?;
            if one.is_empty() {
                return Err(coded(2, format!("--set {s}: expected KEY=VALUE")));
            }
            pairs.extend(one);
        }
        if let Some(seed) = self.seed {
            pairs.insert("seed".into(), seed.to_string());
        }
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::from_pairs(&pairs, env.as_deref()).map_err(|e| coded(2, e.to_string()))
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of scenes.
    #[arg(long)]
    scenes: usize,
    /// Dataset seed.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Views merged per scene.
    #[arg(long, default_value_t = 1)]
    views: usize,
    /// Standard deviation of the Gaussian point noise (m).
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Fraction of points perturbed by noise.
    #[arg(long, default_value_t = 0.0)]
    noise_frac: f64,
    /// Config file supplying voxel size and gripper geometry.
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.views == 0 || a.noise_sigma.is_nan() || a.noise_sigma < 0.0 || !(0.0..=1.0).contains(&a.noise_frac) {
        return Err(coded(2, "--views must be positive, --noise-sigma >= 0, --noise-frac in [0, 1]"));
    }
    let cfg = ConfigArgs { config: a.config.clone(), sets: Vec::new(), seed: Some(a.seed) }.resolve(None)?;
    let obs = ObservationConfig {
        views: a.views,
        noise_sigma: a.noise_sigma,
        noise_fraction: a.noise_frac,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let m = &cfg.model;
    (0..a.scenes).into_par_iter().try_for_each(|i| -> Result<()> {
        let sample = generate_sample(scene_seed(a.seed, i), &obs, m.pad(), m.region.v)
            .with_context(|| format!("generating scene {i}"))?;
        save_sample(&a.out, i, &sample).with_context(|| format!("writing scene {i} to {}", a.out.display()))?;
        Ok(())
    })?;
    eprintln!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `model.ckpt`, `train.jsonl` and `config.txt`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint (parameters and optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    if !cfg.defaults_used.is_empty() {
        eprintln!("config defaults used for: {}", cfg.defaults_used.join(", "));
    }
    let samples = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    let mut state = TrainState::new(&model);
    if let Some(p) = &a.resume {
        let ck = read_ckpt1(&read(p)?)?;
        model.load_checkpoint(&ck)?;
        state.adam = ck.adam.unwrap_or_else(|| AdamState::new(model.param_count()));
    }
    eprintln!("labelling {} scenes", samples.len());
    let labels = cfg.train.labels;
    let scenes = samples.par_iter().map(|s| TrainScene::label(s, &labels)).collect::<occugrasp::Result<Vec<_>>>()?;

    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), cfg.to_text())?;
    let log_path = a.out.join("train.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let header = serde_json::json!({
        "event": "start",
        "step": state.step(),
        "descriptor": model.descriptor(),
        "defaults": cfg.defaults_used,
    });
    writeln!(log, "{header}")?;
    let mut io_error = None;
    let result = run_training(&mut model, &mut state, &scenes, &cfg.train, |step, report| {
        let mut line = serde_json::to_value(report).expect("loss reports serialize");
        line["step"] = step.into();
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e).context("writing the training log");
    }
    let ck: Checkpoint = model.checkpoint(Some(state.adam.clone()));
    write(&a.out.join("model.ckpt"), write_ckpt1(&ck))?;
    match result {
        Ok(_) => {
            eprintln!("trained to step {}; checkpoint in {}", state.step(), a.out.display());
            Ok(())
        }
        Err(e) => Err(anyhow::Error::new(e).context("training stopped; last good parameters were saved")),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    /// Query occupancy only inside the local grasp regions.
    Local,
    /// Query a dense global grid and read the regions off it.
    Dense,
}

impl Mode {
    fn query(self) -> QueryMode {
        match self {
            Mode::Local => QueryMode::Local,
            Mode::Dense => QueryMode::Dense(DENSE_CELLS),
        }
    }
}

/// Loads a checkpoint into the model described by `cfg`.
fn load_model(ckpt: &Path, cfg: &RunConfig) -> Result<Model> {
    let ck = read_ckpt1(&read(ckpt)?).with_context(|| format!("reading {}", ckpt.display()))?;
    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    model.load_checkpoint(&ck)?;
    Ok(model)
}

fn sibling_config(ckpt: &Path) -> Option<PathBuf> {
    ckpt.parent().map(|d| d.join("config.txt"))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint; `config.txt` next to it is used when `--config` is absent.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated ablation flags applied on top of the config.
    #[arg(long)]
    ablate: Option<String>,
    /// Metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Grasp candidates per scene.
    #[arg(long, default_value_t = 1024)]
    candidates: usize,
    #[arg(long, value_enum, default_value_t = Mode::Local)]
    mode: Mode,
    /// Skip the grasp oracle and report occupancy metrics only.
    #[arg(long)]
    occupancy_only: bool,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve(sibling_config(&a.ckpt).as_deref())?;
    if let Some(f) = &a.ablate {
        cfg.model.ablation.apply_flags(f).map_err(|e| coded(2, e.to_string()))?;
    }
    let model = load_model(&a.ckpt, &cfg)?;
    let samples = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let ec = EvalConfig {
        points: cfg.train.labels.points,
        candidates: a.candidates,
        seed: cfg.train.seed,
        mode: a.mode.query(),
        occupancy_only: a.occupancy_only,
        ..Default::default()
    };
    let rows = evaluate(&model, &samples, &ec)?;
    let meta = [
        ("descriptor", model.descriptor()),
        ("ablate", cfg.model.ablation.flags()),
        ("scenes", samples.len().to_string()),
        ("points", ec.points.to_string()),
        ("candidates", ec.candidates.to_string()),
        ("mode", format!("{:?}", ec.mode)),
        ("seed", ec.seed.to_string()),
    ];
    write(&a.out, metrics_csv(&rows, &meta))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint; `config.txt` next to it is used when `--config` is absent.
    #[arg(long)]
    ckpt: PathBuf,
    /// PCB1 point cloud.
    #[arg(long)]
    cloud: PathBuf,
    /// Output directory for `poses.csv` and `occupancy.occ`.
    #[arg(long)]
    out: PathBuf,
    /// Grasp candidates.
    #[arg(long, default_value_t = 1024)]
    candidates: usize,
}

pub const POSES_HEADER: &str = "rank,x,y,z,r00,r01,r02,r10,r11,r12,r20,r21,r22,angle,depth,width,score";

pub fn infer(a: &InferArgs) -> Result<()> {
    let cfg = a.cfg.resolve(sibling_config(&a.ckpt).as_deref())?;
    let model = load_model(&a.ckpt, &cfg)?;
    let bytes = read(&a.cloud)?;
    let cloud = read_pcb1(&bytes).map_err(|e| coded(6, format!("{}: {e}", a.cloud.display())))?;
    if cloud.is_empty() {
        return Err(coded(6, format!("{}: empty cloud", a.cloud.display())));
    }
    let seed = rng::derive(cfg.train.seed, streams::INFER);
    let idx = sample_fixed_indices(cloud.len(), cfg.train.labels.points, seed)?;
    let points: Vec<_> = idx.iter().map(|&i| cloud.points[i]).collect();
    let opts = InferOptions { candidates: a.candidates, seed, ..Default::default() };
    let start = Instant::now();
    let out = model.infer(&points, &opts, &OpCounters::default())?;
    let wall = start.elapsed().as_secs_f64();

    create_dir(&a.out)?;
    let mut csv = format!("{POSES_HEADER}\n");
    for (rank, p) in out.poses.iter().enumerate() {
        let m = &p.rotation.0;
        csv.push_str(&format!("{rank},{},{},{},", p.point.x, p.point.y, p.point.z));
        for r in 0..3 {
            for c in 0..3 {
                csv.push_str(&format!("{},", m[(r, c)]));
            }
        }
        csv.push_str(&format!("{},{},{},{}\n", p.angle(), p.depth(), p.width, p.score));
    }
    write(&a.out.join("poses.csv"), csv)?;
    let grid = match &out.region {
        Some(r) => region_to_grid(r, &out.occupied())?,
        None => OccupancyGrid::empty(Default::default(), cfg.model.region.v, [1, 1, 1])?,
    };
    write(&a.out.join("occupancy.occ"), write_occ1(&grid))?;
    let t = out.times;
    eprintln!("timing (s)");
    eprintln!("  encode {:.6}", t.encode);
    eprintln!("  planes {:.6}", t.planes);
    eprintln!("  query  {:.6}", t.query);
    eprintln!("  decode {:.6}", t.decode);
    eprintln!("  total  {wall:.6}");
    eprintln!("{} poses, {} queried voxels", out.poses.len(), out.queried_voxels);
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint of the full model (also run with the dense global query).
    #[arg(long)]
    ckpt: PathBuf,
    /// Checkpoint trained with `ablate = ball_query`.
    #[arg(long)]
    ball_ckpt: Option<PathBuf>,
    /// Checkpoint trained with `ablate = no_occupancy`.
    #[arg(long)]
    no_occupancy_ckpt: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comparison CSV path.
    #[arg(long, default_value = "strategies.csv")]
    out: PathBuf,
    /// Grasp candidates per scene.
    #[arg(long, default_value_t = 1024)]
    candidates: usize,
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = a.cfg.resolve(sibling_config(&a.ckpt).as_deref())?;
    let ours = load_model(&a.ckpt, &cfg)?;
    let variant = |path: &Path, flag: &str| -> Result<Model> {
        let mut c = a.cfg.resolve(sibling_config(path).as_deref())?;
        c.model.ablation.apply_flags(flag)?;
        load_model(path, &c)
    };
    let ball = a.ball_ckpt.as_deref().map(|p| variant(p, "ball_query")).transpose()?;
    let no_occ = a.no_occupancy_ckpt.as_deref().map(|p| variant(p, "no_occupancy")).transpose()?;
    let samples = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let mut strategies = Vec::new();
    if let Some(m) = &no_occ {
        strategies.push(Strategy { name: "w/o occupancy", model: m, mode: QueryMode::Local });
    }
    strategies.push(Strategy { name: "global tri-plane", model: &ours, mode: QueryMode::Dense(DENSE_CELLS) });
    if let Some(m) = &ball {
        strategies.push(Strategy { name: "ball query", model: m, mode: QueryMode::Local });
    }
    strategies.push(Strategy { name: "ours", model: &ours, mode: QueryMode::Local });
    if samples.is_empty() {
        bail!("no scenes to benchmark");
    }
    let ec = EvalConfig {
        points: cfg.train.labels.points,
        candidates: a.candidates,
        seed: cfg.train.seed,
        ..Default::default()
    };
    let rows = bench_strategies(&strategies, &samples, &ec)?;
    write(&a.out, strategies_csv(&rows))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}
