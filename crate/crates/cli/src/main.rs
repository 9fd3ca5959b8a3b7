use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowtrace_cli::config::{load_config, ConfigFile};
use flowtrace_cli::experiments::flowvar::{self, FlowvarOptions};
use flowtrace_cli::experiments::health::{self, HealthOptions, HealthTask};
use flowtrace_cli::experiments::movielens::{self, MovielensOptions};
use flowtrace_cli::experiments::prop1::{self, Prop1Options, SynthModel};
use flowtrace_cli::experiments::parse_method;
use flowtrace_cli::exit_code;
use flowtrace_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flowtrace",
    about = "Train models while measuring per-individual influence flows",
    version
)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel splits/repeats/retrainings
    /// (default: all cores). Does not affect results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rating-prediction experiment on a MovieLens-format file.
    Movielens(MovielensArgs),
    /// Health-record experiments (one data point per individual).
    Health(HealthArgs),
    /// Monte-Carlo check that mean inflow equals mean outflow under
    /// i.i.d. batches and deployment draws.
    Prop1(Prop1Args),
    /// Per-individual flow variability across repeated runs.
    Flowvar(FlowvarArgs),
}

#[derive(Args)]
struct MovielensArgs {
    /// Path to the ratings file (tab-separated: user, item, rating,
    /// timestamp).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Regularization coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Influence method: tracin or marginal.
    #[arg(long)]
    method: Option<String>,
    /// Per-example gradient norm cap.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Run the marginal method despite its retraining cost.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct HealthArgs {
    /// Which experiment: diabetes (linear regression) or breastcancer
    /// (logistic regression).
    #[arg(long)]
    task: String,
    /// Path to the CSV file with a "target" label column.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args)]
struct Prop1Args {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    individuals: Option<usize>,
    #[arg(long)]
    points_per_batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Deployment examples drawn per trial.
    #[arg(long)]
    deploy_size: Option<usize>,
    /// Synthetic model family: linear or mf.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args)]
struct FlowvarArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// How many individuals to select (by rank of average inflow).
    #[arg(long)]
    individuals: Option<usize>,
    /// Training runs of the single split.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    }
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Movielens(args) => movielens::run(&resolve_movielens(args, &file)?),
        Command::Health(args) => health::run(&resolve_health(args, &file)?),
        Command::Prop1(args) => prop1::run(&resolve_prop1(args, &file)?),
        Command::Flowvar(args) => flowvar::run(&resolve_flowvar(args, &file)?),
    }
}

fn require_data(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Error::invalid(format!("--data is required for {what}")))
}

fn resolve_movielens(args: MovielensArgs, file: &ConfigFile) -> Result<MovielensOptions> {
    let c = &file.movielens;
    let data = require_data(args.data, &c.data, "movielens")?;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from("out/movielens"));
    let mut opts = MovielensOptions::defaults(data, out_dir);
    opts.splits = args.splits.or(c.splits).unwrap_or(opts.splits);
    opts.repeats = args.repeats.or(c.repeats).unwrap_or(opts.repeats);
    opts.train_fraction = args
        .train_fraction
        .or(c.train_fraction)
        .unwrap_or(opts.train_fraction);
    opts.dim = args.dim.or(c.dim).unwrap_or(opts.dim);
    opts.lambda = args.lambda.or(c.lambda).unwrap_or(opts.lambda);
    opts.steps = args.steps.or(c.steps).unwrap_or(opts.steps);
    opts.lr = args.lr.or(c.lr).unwrap_or(opts.lr);
    opts.seed = args.seed.or(c.seed).unwrap_or(opts.seed);
    opts.method = parse_method(
        args.method
            .or_else(|| c.method.clone())
            .as_deref()
            .unwrap_or("tracin"),
    )?;
    opts.clip_norm = args.clip_norm.or(c.clip_norm);
    opts.force = args.force;
    Ok(opts)
}

fn resolve_health(args: HealthArgs, file: &ConfigFile) -> Result<HealthOptions> {
    let c = &file.health;
    let task = HealthTask::parse(&args.task)?;
    let data = require_data(args.data, &c.data, "health")?;
    let out_dir = args
        .out_dir
        .unwrap_or_else(|| PathBuf::from(format!("out/health-{}", task.as_str())));
    let mut opts = HealthOptions::defaults(task, data, out_dir);
    opts.splits = args.splits.or(c.splits).unwrap_or(opts.splits);
    opts.train_fraction = args
        .train_fraction
        .or(c.train_fraction)
        .unwrap_or(opts.train_fraction);
    opts.steps = args.steps.or(c.steps).unwrap_or(opts.steps);
    opts.lr = args.lr.or(c.lr).unwrap_or(opts.lr);
    opts.seed = args.seed.or(c.seed).unwrap_or(opts.seed);
    opts.method = parse_method(
        args.method
            .or_else(|| c.method.clone())
            .as_deref()
            .unwrap_or("tracin"),
    )?;
    opts.clip_norm = args.clip_norm.or(c.clip_norm);
    Ok(opts)
}

fn resolve_prop1(args: Prop1Args, file: &ConfigFile) -> Result<Prop1Options> {
    let c = &file.prop1;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from("out/prop1"));
    let mut opts = Prop1Options::defaults(out_dir);
    opts.trials = args.trials.or(c.trials).unwrap_or(opts.trials);
    opts.individuals = args
        .individuals
        .or(c.individuals)
        .unwrap_or(opts.individuals);
    opts.points_per_batch = args
        .points_per_batch
        .or(c.points_per_batch)
        .unwrap_or(opts.points_per_batch);
    opts.steps = args.steps.or(c.steps).unwrap_or(opts.steps);
    opts.deploy_size = args
        .deploy_size
        .or(c.deploy_size)
        .unwrap_or(opts.deploy_size);
    opts.model = SynthModel::parse(
        args.model
            .or_else(|| c.model.clone())
            .as_deref()
            .unwrap_or("linear"),
    )?;
    opts.seed = args.seed.or(c.seed).unwrap_or(opts.seed);
    opts.clip_norm = args.clip_norm.or(c.clip_norm);
    Ok(opts)
}

fn resolve_flowvar(args: FlowvarArgs, file: &ConfigFile) -> Result<FlowvarOptions> {
    let c = &file.flowvar;
    let data = require_data(args.data, &c.data, "flowvar")?;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from("out/flowvar"));
    let mut opts = FlowvarOptions::defaults(data, out_dir);
    opts.individuals = args
        .individuals
        .or(c.individuals)
        .unwrap_or(opts.individuals);
    opts.runs = args.runs.or(c.runs).unwrap_or(opts.runs);
    opts.train_fraction = args.train_fraction.unwrap_or(opts.train_fraction);
    opts.dim = args.dim.unwrap_or(opts.dim);
    opts.lambda = args.lambda.unwrap_or(opts.lambda);
    opts.steps = args.steps.unwrap_or(opts.steps);
    opts.lr = args.lr.unwrap_or(opts.lr);
    opts.seed = args.seed.or(c.seed).unwrap_or(opts.seed);
    Ok(opts)
}
