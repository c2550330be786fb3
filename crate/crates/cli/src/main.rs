//! `rprl`: train, evaluate and sweep models, generate synthetic corpora,
//! and integrate the kinetic model on a graph.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use rprl_core::formats::{load_dataset, parse_edges, write_dataset};
use rprl_core::harness::{
    evaluate, parse_grid, sweep, test_metrics_lenient, train, write_summary_csv, write_sweep_csv, EpochRecord,
    ModelCheckpoint, RunConfig, SplitName,
};
use rprl_core::kinetics::{
    integrate, simulate_synthetic, write_trajectory_csv, Adjacency, KineticForm, KineticParams, StateDistribution,
    SynthConfig, Topology,
};
use rprl_core::tasks::{write_metrics_csv, write_metrics_json, MetricMap};
use rprl_core::{Error, Result, Task, TaskDataset};

#[derive(Parser)]
#[command(name = "rprl", version, about = "Propagation-aware graph representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.json, metrics.json and metrics.csv.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Evaluate(EvalArgs),
    /// Train once per grid point and repeat; writes sweep.csv and summary.csv.
    Sweep(SweepArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Integrate the kinetic model on an edge list and print the trajectory.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat `key = value` file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// graph (rumor), node (bot) or link (diffusion).
    #[arg(long)]
    task: Option<String>,
    /// Dataset directory (or a trees.jsonl file for the graph task).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    pretrain_from: Option<PathBuf>,
    #[arg(long)]
    few_shot: Option<String>,
    /// Copy every pretrained parameter and skip training.
    #[arg(long)]
    zero_shot: bool,
    /// no-pretrain, no-prop-embedding, regular-kinetic or literal-ode; repeatable.
    #[arg(long)]
    ablation: Vec<String>,
    /// Any other config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "rprl-out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for metrics.json and metrics.csv; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Grid such as `gamma=0,0.5,1;lambda=0,0.5`.
    #[arg(long)]
    sweep: String,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "graph")]
    task: String,
    #[arg(long, default_value_t = 200)]
    n_graphs: usize,
    #[arg(long, default_value_t = 5)]
    min_nodes: usize,
    #[arg(long, default_value_t = 15)]
    max_nodes: usize,
    #[arg(long, default_value_t = 0.4)]
    beta1: f64,
    #[arg(long, default_value_t = 0.1)]
    beta2: f64,
    /// Label flip probability.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    feature_noise: f64,
    /// Comma-separated: tree, small-world, star.
    #[arg(long, default_value = "tree")]
    topologies: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// `src<TAB>dst[<TAB>relation]` lines; relations are ignored.
    #[arg(long)]
    edges: PathBuf,
    /// Initially informed nodes as `id:state` with state 1 or 2, comma-separated.
    #[arg(long)]
    seeds: String,
    #[arg(long, default_value_t = 0.4)]
    beta1: f64,
    #[arg(long, default_value_t = 0.1)]
    beta2: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// neighbor-state, own-state or regular.
    #[arg(long, default_value = "neighbor-state")]
    form: String,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Checkpoint(_) | Error::InvalidInput(_) | Error::UndefinedMetric(_) => 3,
        Error::Divergence(_) | Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_kv(&text)?
        }
        None => RunConfig::new(Task::Graph),
    };
    if let Some(t) = &a.task {
        cfg.set("task", t)?;
    }
    if let Some(d) = &a.data {
        cfg.data = vec![d.clone()];
    }
    let scalars = [
        ("gamma", &a.gamma),
        ("lambda", &a.lambda),
        ("seed", &a.seed),
        ("epochs", &a.epochs),
        ("few_shot", &a.few_shot),
    ];
    for (key, value) in scalars {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(p) = &a.pretrain_from {
        cfg.pretrain_from = Some(p.clone());
    }
    if a.zero_shot {
        cfg.zero_shot = true;
    }
    if !a.ablation.is_empty() {
        cfg.set("ablation", &a.ablation.join(","))?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {kv:?} is not key=value")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(cfg: &RunConfig) -> Result<TaskDataset> {
    let path = cfg
        .data
        .first()
        .ok_or_else(|| Error::Config("no dataset given (--data or `data =` in the config file)".into()))?;
    load_dataset(path, cfg.task)
}

fn write_metrics(dir: &Path, metrics: &MetricMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_json(BufWriter::new(fs::File::create(dir.join("metrics.json"))?), metrics)?;
    write_metrics_csv(BufWriter::new(fs::File::create(dir.join("metrics.csv"))?), metrics)?;
    Ok(())
}

fn print_metrics(metrics: &MetricMap) -> Result<()> {
    let mut out = io::stdout().lock();
    write_metrics_json(&mut out, metrics)?;
    writeln!(out)?;
    Ok(())
}

// A closed stdout (e.g. piping into `head`) must not abort training.
fn log_line(r: &EpochRecord) {
    let _ = writeln!(io::stdout(), "{r}");
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = run_config(a)?;
    let data = load(&cfg)?;
    let ckpt = train(&cfg, &data, &mut log_line)?;
    fs::create_dir_all(&a.out)?;
    ckpt.save(&a.out.join("checkpoint.json"))?;
    fs::write(a.out.join("config.txt"), cfg.to_kv())?;
    let metrics = test_metrics_lenient(&ckpt, &data)?;
    write_metrics(&a.out, &metrics)?;
    info!("best epoch {}", ckpt.best_epoch);
    print_metrics(&metrics)
}

fn cmd_evaluate(a: &EvalArgs) -> Result<()> {
    let split: SplitName = a.split.parse()?;
    let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data, ckpt.run.task)?;
    let metrics = evaluate(&ckpt, &data, split)?;
    if let Some(dir) = &a.out {
        write_metrics(dir, &metrics)?;
    }
    print_metrics(&metrics)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let grid = parse_grid(&a.sweep, &cfg)?;
    let data = load(&cfg)?;
    let rows = sweep(&cfg, &data, &grid, a.repeats, &mut log_line)?;
    fs::create_dir_all(&a.run.out)?;
    write_sweep_csv(BufWriter::new(fs::File::create(a.run.out.join("sweep.csv"))?), &rows)?;
    write_summary_csv(BufWriter::new(fs::File::create(a.run.out.join("summary.csv"))?), &rows)?;
    write_summary_csv(io::stdout().lock(), &rows)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let topologies = a
        .topologies
        .split(',')
        .map(|t| t.trim().parse::<Topology>())
        .collect::<Result<Vec<_>>>()?;
    let cfg = SynthConfig {
        task: a.task.parse()?,
        n_graphs: a.n_graphs,
        min_nodes: a.min_nodes,
        max_nodes: a.max_nodes,
        topologies,
        beta: KineticParams::new(a.beta1, a.beta2).map_err(|e| Error::Config(e.to_string()))?,
        noise: a.noise,
        feature_noise: a.feature_noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let data = simulate_synthetic(&cfg).map_err(|e| match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    })?;
    write_dataset(&a.out, &data)?;
    writeln!(io::stdout(), "wrote {} units to {}", data.unit_count(), a.out.display())?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let form: KineticForm = a.form.parse()?;
    let text = fs::read_to_string(&a.edges).map_err(|e| Error::Data(format!("{}: {e}", a.edges.display())))?;
    let edges = parse_edges(&text, &a.edges)?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut intern = |id: &str| {
        *index.entry(id.to_string()).or_insert_with(|| {
            ids.push(id.to_string());
            ids.len() - 1
        })
    };
    let pairs: Vec<(usize, usize)> = edges.iter().map(|(a, b, _)| (intern(a), intern(b))).collect();
    let mut seeds = Vec::new();
    for tok in a.seeds.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (id, k) = tok
            .rsplit_once(':')
            .ok_or_else(|| Error::Config(format!("seed {tok:?} is not id:state")))?;
        let k: usize = k.parse().map_err(|_| Error::Config(format!("seed state {k:?} is not 1 or 2")))?;
        let v = *index
            .get(id)
            .ok_or_else(|| Error::Config(format!("seed node {id} does not occur in the edge list")))?;
        seeds.push((v, k));
    }
    let n = ids.len();
    let params = KineticParams::new(a.beta1, a.beta2).map_err(|e| Error::Config(e.to_string()))?;
    let s0 = StateDistribution::seeded(n, &seeds).map_err(|e| Error::Config(e.to_string()))?;
    let adj = Adjacency::from_edges(n, pairs)?;
    let traj = integrate(&s0, &adj, params, form, a.steps, a.dt).map_err(|e| Error::Config(e.to_string()))?;
    if traj.limited > 0 {
        log::warn!("{} node updates were flux-limited; consider a smaller --dt", traj.limited);
    }
    match &a.out {
        Some(p) => write_trajectory_csv(BufWriter::new(fs::File::create(p)?), &traj.states),
        None => write_trajectory_csv(io::stdout().lock(), &traj.states),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(Error::Json(e)) if e.io_error_kind() == Some(io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rprl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
