//! `matseg` command line: simulate, segment, transform, forecast and bench.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<matseg::Error> for CliError {
    fn from(e: matseg::Error) -> Self {
        match e.kind() {
            matseg::ErrorKind::Validation => CliError::Validation(e.to_string()),
            matseg::ErrorKind::Data => CliError::Data(e.to_string()),
            matseg::ErrorKind::Numeric => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "matseg", version, about = "Segmentation and forecasting of matrix time series")]
struct Cli {
    /// Worker threads (defaults to MATSEG_THREADS, then the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON object whose entries override the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a series from one of the simulation designs.
    Simulate(SimulateArgs),
    /// Estimate the transforms and segment both modes of a series.
    Segment(SegmentArgs),
    /// Map a series to its latent matrix or back.
    Transform(TransformArgs),
    /// Rolling out-of-sample forecasts with optional baselines.
    Forecast(ForecastArgs),
    /// Monte-Carlo replication of a simulation table cell.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    #[arg(long)]
    tau0: Option<usize>,
    #[arg(long)]
    tau1: Option<usize>,
    #[arg(long)]
    c_r: Option<f64>,
    #[arg(long)]
    rho_floor: Option<f64>,
    /// `ratio` or `threshold:<rho0>`.
    #[arg(long)]
    selector: Option<String>,
    /// Turn prewhitening on or off.
    #[arg(long)]
    prewhiten: Option<bool>,
    /// `vector` (one VAR per column) or `scalar` (one AR per entry).
    #[arg(long)]
    prewhiten_kind: Option<String>,
    #[arg(long)]
    max_ar_order: Option<usize>,
    /// `identity`, `log1p` or `power:<alpha>`.
    #[arg(long)]
    eig_transform: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write truth.json and u.csv.
    #[arg(long)]
    with_truth: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct TransformArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Apply a saved transform.json instead of fitting one.
    #[arg(long)]
    apply: Option<PathBuf>,
    /// Treat the input as latent and map it back to the observed scale.
    #[arg(long)]
    inverse: bool,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    holdout: Option<usize>,
    /// `refit` or `fixed`.
    #[arg(long)]
    scheme: Option<String>,
    /// Conditional-mean CSV aligned with the input; scores against it instead of the data.
    #[arg(long)]
    truth_file: Option<PathBuf>,
    /// Comma-separated list of `mar1_direct`, `var1_stacked`, `ar1_per_cell`.
    #[arg(long, value_delimiter = ',')]
    baselines: Vec<String>,
    /// Window length of the averaged error CSV.
    #[arg(long)]
    week: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// 1, 2 or 3; picks the design and its default cell.
    #[arg(long)]
    table: Option<u8>,
    /// Cell such as `q4p4,T1000`.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    scheme: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

macro_rules! set {
    ($cfg:expr, $($field:ident <- $value:expr),+ $(,)?) => {
        $(if let Some(v) = $value { $cfg.$field = v.into(); })+
    };
}

fn apply_pipeline(cfg: &mut RunConfig, a: PipelineArgs) {
    set!(cfg,
        tau0 <- a.tau0, tau1 <- a.tau1, c_r <- a.c_r, rho_floor <- a.rho_floor,
        selector <- a.selector, prewhiten <- a.prewhiten, prewhiten_kind <- a.prewhiten_kind,
        max_ar_order <- a.max_ar_order, eig_transform <- a.eig_transform,
    );
}

fn bench_defaults(table: Option<u8>) -> Result<(&'static str, (usize, usize, usize)), CliError> {
    match table {
        None | Some(3) => Ok(("example3", (6, 6, 500))),
        Some(1) => Ok(("example1", (4, 4, 1000))),
        Some(2) => Ok(("example2", (3, 6, 1000))),
        Some(t) => Err(CliError::Validation(format!("unknown table {t}"))),
    }
}

fn resolve(cli: Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig { threads: cli.threads, ..Default::default() };
    match cli.command {
        Command::Simulate(a) => {
            cfg.command = "simulate".into();
            set!(cfg, design <- a.design, p <- a.p, q <- a.q, t <- a.t, seed <- a.seed);
            cfg.output = a.out;
            cfg.with_truth = a.with_truth;
        }
        Command::Segment(a) => {
            cfg.command = "segment".into();
            cfg.input = a.input;
            cfg.output = a.out;
            apply_pipeline(&mut cfg, a.pipeline);
        }
        Command::Transform(a) => {
            cfg.command = "transform".into();
            cfg.input = a.input;
            cfg.output = a.out;
            cfg.transform = a.apply;
            cfg.inverse = a.inverse;
            apply_pipeline(&mut cfg, a.pipeline);
        }
        Command::Forecast(a) => {
            cfg.command = "forecast".into();
            cfg.input = a.input;
            cfg.output = a.out;
            cfg.truth = a.truth_file;
            cfg.baselines = a.baselines;
            set!(cfg, horizon <- a.horizon, holdout <- a.holdout, scheme <- a.scheme, week <- a.week);
            apply_pipeline(&mut cfg, a.pipeline);
        }
        Command::Bench(a) => {
            cfg.command = "bench".into();
            let (design, mut cell) = bench_defaults(a.table)?;
            cfg.design = design.into();
            if let Some(c) = &a.cell {
                cell = config::parse_cell(c, cell)?;
            }
            (cfg.p, cfg.q, cfg.t) = cell;
            set!(cfg, design <- a.design, reps <- a.reps, seed <- a.seed, horizon <- a.horizon,
                holdout <- a.holdout, scheme <- a.scheme);
            cfg.output = a.out;
            apply_pipeline(&mut cfg, a.pipeline);
        }
    }
    if let Some(path) = &cli.config {
        cfg = config::apply_file(&cfg, path)?;
    }
    if cfg.threads.is_none() {
        if let Ok(v) = std::env::var("MATSEG_THREADS") {
            let n = v.trim().parse().map_err(|_| CliError::Validation(format!("MATSEG_THREADS='{v}' is not a count")))?;
            cfg.threads = Some(n);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    match cfg.command.as_str() {
        "simulate" => commands::simulate(&cfg),
        "segment" => commands::segment(&cfg),
        "transform" => commands::transform(&cfg),
        "forecast" => commands::forecast(&cfg),
        "bench" => commands::bench(&cfg),
        other => unreachable!("unknown command {other}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("matseg: {e}");
            ExitCode::from(e.code())
        }
    }
}
