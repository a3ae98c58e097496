//! `prefnet`: fit, quantify, validate and simulate from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 load failure, 3 training failure,
//! 4 inference failure, 5 missing or unreadable artifact.

mod config;
mod error;
mod fit;
mod manifest;
mod quantify;
mod simulate;
mod validate;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prefnet::Exec;

use crate::error::{code, CliError};

#[derive(Parser, Debug)]
#[command(
    name = "prefnet",
    version,
    about = "Structural preference estimation for forced-choice conjoint data"
)]
struct Cli {
    /// Worker threads; 1 runs every loop sequentially and reproduces bitwise.
    /// Defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-fit the preference network and run debiased inference.
    Fit(FitArgs),
    /// Compute a structural quantity from a fitted run.
    Quantify(QuantifyArgs),
    /// Compare network column means with homogeneous logit fits.
    Validate(ValidateArgs),
    /// Run the simulation benchmark or factorial grid.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Structured config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format profiles CSV (or pre-differenced rows with --differenced).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Attribute schema (TOML or JSON).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub differenced: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cross-fitting folds.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden layer widths, e.g. `32,32,16`.
    #[arg(long, value_parser = config::parse_hidden)]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ridge on the local information matrices, relative to trace/p.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Treat --ridge as an absolute diagonal term.
    #[arg(long)]
    pub ridge_absolute: bool,
    /// Center cluster sums in the clustered variance.
    #[arg(long)]
    pub centered: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Quantity {
    Ame,
    Polarization,
    Importance,
    Mrs,
    Compdiff,
    Chooseprob,
    Majority,
    Slope,
    Sensitivity,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Ame => "ame",
            Quantity::Polarization => "polarization",
            Quantity::Importance => "importance",
            Quantity::Mrs => "mrs",
            Quantity::Compdiff => "compdiff",
            Quantity::Chooseprob => "chooseprob",
            Quantity::Majority => "majority",
            Quantity::Slope => "slope",
            Quantity::Sensitivity => "sensitivity",
        }
    }
}

#[derive(Args, Debug)]
pub struct QuantifyArgs {
    pub quantity: Quantity,
    /// Directory of a completed `fit` run.
    #[arg(long)]
    pub out: PathBuf,
    /// Covariate to bin respondents by.
    #[arg(long)]
    pub by: Option<String>,
    /// Design columns (`attr:level`), comma separated, or `all`.
    #[arg(long, default_value = "all")]
    pub level: String,
    /// Coefficients within this distance of zero count as zero.
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    #[arg(long)]
    pub num: Option<String>,
    #[arg(long)]
    pub den: Option<String>,
    #[arg(long, default_value_t = prefnet::quantities::MRS_DENOMINATOR_EPS)]
    pub eps: f64,
    #[arg(long)]
    pub penalty: Option<String>,
    /// `none`, `LEVEL`, `max:L1,L2`, or `W*L1+W*|L2|`.
    #[arg(long, default_value = "none")]
    pub benefit: String,
    /// JSON object mapping attribute names to levels.
    #[arg(long)]
    pub profile_a: Option<PathBuf>,
    #[arg(long)]
    pub profile_b: Option<PathBuf>,
    /// Ordered bracket levels (`attr:level`; the reference level is allowed).
    #[arg(long, value_delimiter = ',')]
    pub brackets: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub midpoints: Vec<f64>,
    /// Level set for the sensitivity index.
    #[arg(long, value_delimiter = ',')]
    pub set: Vec<String>,
    /// Monte Carlo draws for marginal effects.
    #[arg(long, default_value_t = 20_000)]
    pub draws: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Directory of a completed `fit` run.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub by: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SimMode {
    Benchmark,
    Factorial,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "benchmark")]
    pub mode: SimMode,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// TOML simulation spec; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Execution policy and the thread count recorded in manifests.
pub struct Threads {
    pub exec: Exec,
    pub count: usize,
}

fn configure_threads(requested: Option<usize>) -> Result<Threads, CliError> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let count = requested.unwrap_or(available);
    if count == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    if count == 1 || !cfg!(feature = "parallel") {
        return Ok(Threads {
            exec: Exec::Sequential,
            count: 1,
        });
    }
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(count)
        .build_global()
    {
        log::debug!("thread pool already configured: {e}");
    }
    Ok(Threads {
        exec: Exec::Parallel,
        count,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = configure_threads(cli.threads)?;
    match cli.command {
        Command::Fit(args) => fit::run(&args, &threads),
        Command::Quantify(args) => quantify::run(&args, &threads),
        Command::Validate(args) => validate::run(&args, &threads),
        Command::Simulate(args) => simulate::run(&args, &threads),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let status = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => code::USAGE,
            };
            std::process::exit(status);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
