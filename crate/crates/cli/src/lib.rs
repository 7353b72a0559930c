//! `dfm` command-line driver.
//!
//! ```text
//! dfm run --config c.json --methods dfm,model_free --seeds 0..4
//! dfm gen --memory real.csv --n 1000 --out synth.csv
//! dfm eval --real real.csv --synth synth.csv
//! dfm report --dir runs
//! dfm selftest
//! ```

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dfm_core::orchestrator::Method;
use dfm_core::{Error, Result};

pub mod commands;
pub mod selftest;
pub mod svg;

#[derive(Debug, Parser)]
#[command(name = "dfm", version, about = "DVFS reinforcement learning with flow-matched replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every method on every seed and write logs, memories and a summary.
    Run(RunArgs),
    /// Fit a flow model on a transition dump and sample from it.
    Gen(GenArgs),
    /// Compare transition batches and score run logs.
    Eval(EvalArgs),
    /// Aggregate a run directory into tables and charts.
    Report(ReportArgs),
    /// Gradient checks and oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated methods, overriding the config.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    /// Seeds as `a..b` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<SeedList>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Transition CSV to fit.
    #[arg(long, required_unless_present = "model")]
    pub memory: Option<PathBuf>,
    /// Load a saved flow model instead of fitting one.
    #[arg(long, conflicts_with = "memory")]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dfm` or `pure_fm`.
    #[arg(long, default_value = "dfm", value_parser = parse_method)]
    pub method: Method,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to save the fitted model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Real transition CSV.
    #[arg(long, requires = "synth")]
    pub real: Option<PathBuf>,
    /// Synthetic transition CSV compared against `--real`.
    #[arg(long, requires = "real")]
    pub synth: Option<PathBuf>,
    /// Second synthetic CSV scored the same way, for side-by-side output.
    #[arg(long, requires = "real")]
    pub baseline: Option<PathBuf>,
    /// Run log CSVs to score.
    #[arg(long = "log")]
    pub logs: Vec<PathBuf>,
    /// Run log the early frame-rate gain is measured against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `run`.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Also run the slower flow moment-matching oracle.
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s.trim()).map_err(|e| e.to_string())
}

/// `3`, `0..4` (inclusive), `0..=4`, or `1,5,9`.
pub fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let s = s.trim();
    let num = |x: &str| x.trim().parse::<u64>().map_err(|_| format!("bad seed `{x}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',').map(num).collect::<std::result::Result<_, _>>().map(SeedList)
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => commands::run(&args),
        Command::Gen(args) => commands::gen(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Report(args) => commands::report(&args),
        Command::Selftest(args) => {
            let checks = selftest::run_all(args.full);
            for c in &checks {
                println!("{} {:<32} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed == 0 {
                Ok(())
            } else {
                Err(Error::State(format!("{failed} selftest check(s) failed")))
            }
        }
    }
}
