//! `mlopf`: validate feeders, partition them, generate synthetic ones, run
//! the primal-dual OPF with any coupling engine, and benchmark or compare
//! voltage models.

mod commands;
mod error;
mod inputs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlopf::EngineKind;

use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "mlopf",
    version,
    about = "Multi-level primal-dual OPF for radial distribution feeders"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineArg {
    Flat,
    Bilevel,
    Trilevel,
}

impl From<EngineArg> for EngineKind {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Flat => EngineKind::Flat,
            EngineArg::Bilevel => EngineKind::Bilevel,
            EngineArg::Trilevel => EngineKind::Trilevel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Linear,
    Sweep,
}

#[derive(Debug, Clone, Args, serde::Serialize, serde::Deserialize)]
pub struct GlobalArgs {
    /// Network JSON document.
    #[arg(long, global = true)]
    pub network: Option<PathBuf>,

    /// Device JSON document.
    #[arg(long, global = true)]
    pub devices: Option<PathBuf>,

    /// Partition JSON document; derived automatically when omitted.
    #[arg(long, global = true)]
    pub partition: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = EngineArg::Trilevel)]
    pub engine: EngineArg,

    #[arg(long = "voltage-model", global = true, value_enum, default_value_t = ModelArg::Linear)]
    pub voltage_model: ModelArg,

    /// Maximum number of primal-dual steps.
    #[arg(long, global = true)]
    pub iters: Option<usize>,

    #[arg(long = "step-primal", global = true)]
    pub step_primal: Option<f64>,

    #[arg(long = "step-dual", global = true)]
    pub step_dual: Option<f64>,

    /// Dual regularization weight.
    #[arg(long, global = true)]
    pub eta: Option<f64>,

    /// Stop once the saddle residual drops below this value.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,

    /// With the sweep model, run a full sweep every this many evaluations.
    #[arg(long = "sweep-refresh", global = true)]
    pub sweep_refresh: Option<usize>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Log every data access of the coupling engine to audit.jsonl.
    #[arg(long, global = true)]
    pub audit: bool,

    /// Exit with status 3 when the solve stops before converging.
    #[arg(long = "require-convergence", global = true)]
    pub require_convergence: bool,

    /// Repeat timed runs and report the median wall time.
    #[arg(long, global = true, default_value_t = 1)]
    pub repeat: usize,

    /// Write zeros in the trace timing column so repeated runs produce
    /// identical files.
    #[arg(long = "omit-timing", global = true)]
    pub omit_timing: bool,
}

#[derive(Debug, Clone, Subcommand, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "command")]
pub enum Command {
    /// Check the network, device and partition documents.
    Validate,
    /// Derive a partition by greedy subtree grouping.
    Partition {
        /// Target area size in buses (default: an eighth of the feeder).
        #[arg(long = "area-size")]
        area_size: Option<usize>,
        /// Target subarea size in buses (default: a third of the area size).
        #[arg(long = "subarea-size")]
        subarea_size: Option<usize>,
    },
    /// Generate a synthetic feeder with devices and a partition.
    Gen {
        #[arg(long, default_value_t = 300)]
        buses: usize,
        /// Multiplier on the base load.
        #[arg(long = "load-scale")]
        load_scale: Option<f64>,
        /// Load the feeder hard enough to push many voltages below the limit.
        #[arg(long)]
        heavy: bool,
        #[arg(long = "area-size")]
        area_size: Option<usize>,
        #[arg(long = "subarea-size")]
        subarea_size: Option<usize>,
        /// Full generator settings as JSON; overrides the other options.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run the primal-dual OPF.
    Solve,
    /// Time the engines over a sweep of balanced feeder sizes, or on the
    /// given documents. Every run takes exactly --iters steps unless
    /// --tolerance is set.
    Bench {
        /// Flat dimensions of the generated feeders.
        #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024])]
        sizes: Vec<usize>,
        /// Subareas per area.
        #[arg(long, default_value_t = 4)]
        subareas: usize,
        #[arg(long, value_delimiter = ',', value_enum, default_values_t = vec![EngineArg::Flat, EngineArg::Bilevel, EngineArg::Trilevel])]
        engines: Vec<EngineArg>,
    },
    /// Compare linear and nonlinear voltages at scaled preferred injections.
    Compare {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0f64])]
        scales: Vec<f64>,
    },
}

fn run(cli: &Cli, argv: &[String]) -> CliResult<()> {
    match &cli.command {
        Command::Validate => commands::validate(&cli.global),
        Command::Partition {
            area_size,
            subarea_size,
        } => commands::partition(cli, argv, *area_size, *subarea_size),
        Command::Gen { .. } => commands::gen(cli, argv),
        Command::Solve => commands::solve(cli, argv),
        Command::Bench {
            sizes,
            subareas,
            engines,
        } => commands::bench(cli, argv, sizes, *subareas, engines),
        Command::Compare { scales } => commands::compare(cli, argv, scales),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() {
                error::EXIT_VALIDATION
            } else {
                0
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::from(err.code)
        }
    }
}
