//! Front end for `pnmsim`. `run` parses arguments, executes one command
//! and returns the process exit code.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pnmsim_core::par::{self, Exec};

use commands::{Context, Failure, Format};
use config::RunConfig;

pub const OUT_DIR_ENV: &str = "PNMSIM_OUT_DIR";
pub const LOG_ENV: &str = "PNMSIM_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "pnmsim",
    version,
    about = "Decode-attention simulator for a mesh of near-memory compute cubes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Latency, energy and per-stage breakdown of one point.
    Simulate(Common),
    /// Numerical check of every strategy's dataflow against exact attention.
    Verify(Common),
    /// Design-space or batch sweep.
    Sweep(Common),
    /// TP16, HP and HP_RO side by side.
    Ablate(Common),
    /// The same point on every listed hardware profile.
    Roofline(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps; 1 runs sequentially.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value = "all")]
    pub format: Format,
}

fn context(common: &Common) -> Result<Context, Failure> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("pnmsim-out"));
    let exec = match common.threads {
        Some(0) => return Err(Failure::Config("--threads must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            if !par::init_threads(n) {
                log::warn!("thread pool already sized or parallel backend missing; ignoring --threads {n}");
            }
            Exec::Parallel
        }
        None => Exec::default(),
    };
    Ok(Context {
        config,
        out,
        format: common.format,
        exec,
    })
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(c) => commands::simulate(&context(c)?),
        Command::Verify(c) => commands::verify(&context(c)?),
        Command::Sweep(c) => commands::sweep(&context(c)?),
        Command::Ablate(c) => commands::ablate(&context(c)?),
        Command::Roofline(c) => commands::roofline(&context(c)?),
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
