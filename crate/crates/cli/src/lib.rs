//! Command-line front end: `fit`, `test`, `calibrate` and `simulate`.
//!
//! Exit codes: 0 success, 1 usage or invalid input text, 2 numerical failure,
//! 3 file or data errors. Diagnostics go to standard error only.

mod commands;
pub mod error;
pub mod format;

use clap::{Args, Parser, Subcommand, ValueEnum};
use error::CliError;
use format::Format;
use lvm_infer_core::Correction;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "lvm-infer",
    version,
    about = "Latent variable model fitting with small-sample corrected Wald inference",
    after_help = "Any subcommand accepts --config FILE: one `flag value` per line (# comments), \
                  applied before the command-line flags, which take precedence."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and print the parameter table.
    Fit(FitArgs),
    /// Wald (one equation) or F (several equations) tests of linear hypotheses.
    Test(TestArgs),
    /// Monte Carlo type-1 error calibration of a built-in or custom study.
    Calibrate(CalibrateArgs),
    /// Draw a dataset from a model at given parameter values.
    Simulate(SimulateArgs),
}

fn parse_correction(s: &str) -> Result<Correction, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct Inputs {
    /// Model file in the path-diagram syntax.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// CSV with a header row naming the model variables.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// none, bias, satterthwaite, full or full-neff.
    #[arg(long, default_value = "full-neff", value_parser = parse_correction)]
    correction: Correction,
    /// Cluster-robust (sandwich) standard errors grouped by this data column.
    #[arg(long, value_name = "COLUMN")]
    robust_cluster: Option<String>,
}

#[derive(Debug, Args)]
struct Tolerances {
    /// Fisher scoring iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative log-likelihood change for convergence.
    #[arg(long)]
    tol_loglik: Option<f64>,
    /// Largest absolute score accepted as converged.
    #[arg(long)]
    tol_score: Option<f64>,
    /// Iteration cap of the variance correction.
    #[arg(long)]
    correction_max_iter: Option<usize>,
    /// Frobenius tolerance on successive corrected variance matrices.
    #[arg(long)]
    tol_frob: Option<f64>,
    /// Anderson acceleration depth for the correction (0 = plain iteration).
    #[arg(long)]
    acceleration: Option<usize>,
}

#[derive(Debug, Args)]
struct Output {
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct FitArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    tolerances: Tolerances,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Alternative {
    TwoSided,
    /// H1: Cθ > r
    Greater,
    /// H1: Cθ < r
    Less,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct TestArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma-separated equations tested jointly, e.g. "k1=0,k2=0"; repeat for separate tests.
    #[arg(long, required = true, value_name = "EXPR")]
    contrast: Vec<String>,
    /// One-sided alternatives apply to single-equation contrasts only.
    #[arg(long, value_enum, default_value_t = Alternative::TwoSided)]
    alternative: Alternative,
    #[command(flatten)]
    tolerances: Tolerances,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct CalibrateArgs {
    /// Built-in study A, B or C.
    #[arg(long, conflicts_with = "generative")]
    study: Option<String>,
    /// Generative model file of a custom study.
    #[arg(long, value_name = "FILE", requires = "model")]
    generative: Option<PathBuf>,
    /// Investigator model file of a custom study.
    #[arg(long, value_name = "FILE", requires = "generative")]
    model: Option<PathBuf>,
    /// "name: equation" over investigator labels, e.g. "k1: k1 = 0"; repeatable.
    #[arg(long, value_name = "HYP")]
    hypothesis: Vec<String>,
    /// Generative values "label=value,..." overriding 0 for intercepts and 1 elsewhere.
    #[arg(long, value_name = "VALUES")]
    theta: Option<String>,
    /// Covariate distribution "NAME=normal|binary"; unlisted columns are standard normal.
    #[arg(long, value_name = "SPEC")]
    covariate: Vec<String>,
    /// Cluster-robust tests with one cluster per observation.
    #[arg(long)]
    robust: bool,
    /// Sample sizes.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Replicates per sample size.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, env = "LVM_INFER_THREADS", default_value_t = 0)]
    workers: usize,
    /// Correction modes compared, comma-separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_correction)]
    corrections: Vec<Correction>,
    /// Rejection levels, comma-separated; the first is the headline rate.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SimulateArgs {
    /// Use the generative model, values and covariates of a built-in study.
    #[arg(long, conflicts_with = "model")]
    study: Option<String>,
    /// Model file to simulate from.
    #[arg(long, value_name = "FILE", required_unless_present = "study")]
    model: Option<PathBuf>,
    /// Parameter values "label=value,..." overriding 0 for intercepts and 1 elsewhere.
    #[arg(long, value_name = "VALUES")]
    theta: Option<String>,
    /// Covariate distribution "NAME=normal|binary"; repeatable.
    #[arg(long, value_name = "SPEC")]
    covariate: Vec<String>,
    #[arg(long)]
    n: usize,
    /// Seed; the draw equals replicate 0 of a calibration with the same seed and n.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Splices `--config FILE` contents in front of the subcommand's own flags.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => {
                path = Some(it.next().ok_or_else(|| CliError::Usage("--config needs a file".into()))?);
            }
            Some(s) if s.starts_with("--config=") => path = Some(OsString::from(&s["--config=".len()..])),
            _ => rest.push(a),
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("{}: {e}", PathBuf::from(&path).display())))?;
    let mut tokens = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (flag, value) = match line.split_once(char::is_whitespace) {
            Some((f, v)) => (f, Some(v.trim())),
            None => (line, None),
        };
        let flag = if flag.starts_with("--") { flag.to_string() } else { format!("--{flag}") };
        tokens.push(OsString::from(flag));
        tokens.extend(value.map(OsString::from));
    }
    // argv[0], subcommand, config tokens, remaining flags.
    let at = rest.len().min(2);
    rest.splice(at..at, tokens);
    Ok(rest)
}

/// Runs the program on `args` (including argv[0]) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = match expand_config(args.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a, out),
        Command::Test(a) => commands::test(&a, out),
        Command::Calibrate(a) => commands::calibrate(&a, out, err),
        Command::Simulate(a) => commands::simulate(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
