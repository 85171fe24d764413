//! The `ramp` command line: enumerate, profile, fit, dispatch, evaluate,
//! classify and sample-routing over a per-model workspace directory.

mod commands;
mod workspace;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cost_model::Variant;
use crate::error::{Error, Result};

pub use workspace::{WorkspaceLayout, WorkspaceLock};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

pub const DEFAULT_MASTER_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "ramp", version, about = "Routing-aware tile configuration dispatch for MoE kernels")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Directory holding per-model artifacts.
    #[arg(long, global = true, default_value = "ramp-work")]
    pub workspace: PathBuf,
    /// JSON file overriding hardware model defaults.
    #[arg(long, global = true, value_name = "JSON")]
    pub hw: Option<PathBuf>,
    /// JSON model catalog to use instead of the bundled one.
    #[arg(long, global = true, value_name = "JSON")]
    pub catalog: Option<PathBuf>,
    #[arg(long, global = true, env = "RAMP_MASTER_SEED", default_value_t = DEFAULT_MASTER_SEED)]
    pub seed: u64,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate the valid tile configurations for a model.
    Enumerate {
        #[arg(long)]
        model: String,
    },
    /// Profile every configuration, or ingest an external trace.
    Profile {
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "sim")]
        oracle: OracleSpec,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Fit per-configuration cost models from the trace.
    Fit {
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "p4", value_parser = parse_variant)]
        variant: Variant,
    },
    /// Select a configuration for one expert histogram.
    Dispatch {
        #[arg(long)]
        model: String,
        /// CSV with one row of per-expert counts, optionally under a header
        /// with `c_<i>` columns. `-` reads standard input.
        #[arg(long)]
        histogram: PathBuf,
        /// Zero-based data row to use.
        #[arg(long, default_value_t = 0)]
        row: usize,
    },
    /// Regret, speedup, ablation or curve reports.
    Evaluate {
        #[arg(long)]
        model: String,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long, default_value = "sim")]
        oracle: OracleSpec,
        #[command(flatten)]
        grid: GridArgs,
        /// Batch size for the utilization-vs-balancedness curve.
        #[arg(long, default_value_t = 64)]
        curve_batch: u64,
    },
    /// Region classification for every catalog model.
    Classify {
        /// Exit with status 3 if any row differs from the reference table.
        #[arg(long)]
        check: bool,
    },
    /// Draw expert histograms at a target balancedness.
    SampleRouting {
        #[arg(long, required_unless_present = "experts")]
        model: Option<String>,
        #[arg(long, requires = "top_k", conflicts_with = "model")]
        experts: Option<usize>,
        #[arg(long)]
        top_k: Option<u32>,
        /// Tokens per step.
        #[arg(long = "batch", short = 'S')]
        batch: u64,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Regret,
    Speedup,
    Ablation,
    Curves,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long)]
    pub replicates: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long = "test-batch-sizes", value_delimiter = ',')]
    pub batch_sizes: Option<Vec<u64>>,
    #[arg(long = "test-betas", value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long = "test-replicates")]
    pub replicates: Option<u32>,
}

/// Where ground-truth times come from.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    /// The built-in simulator, optionally with a parameter file.
    Sim(Option<PathBuf>),
    /// A pre-recorded trace CSV.
    Trace(PathBuf),
}

impl FromStr for OracleSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "sim" => Ok(OracleSpec::Sim(None)),
            Some(("sim", p)) if !p.is_empty() => Ok(OracleSpec::Sim(Some(PathBuf::from(p)))),
            Some(("trace", p)) if !p.is_empty() => Ok(OracleSpec::Trace(PathBuf::from(p))),
            _ => Err(format!("expected sim, sim:<params.json> or trace:<path>, got '{s}'")),
        }
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` and runs the command, writing human output to `out`.
/// Returns the process exit code; errors are reported on `err`.
pub fn run_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command. `Ok` carries the exit code, which is nonzero only
/// for a failed `--check`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let ctx = commands::Context::new(&cli.global)?;
    match &cli.command {
        Command::Enumerate { model } => commands::enumerate(&ctx, model, out),
        Command::Profile { model, oracle, plan } => commands::profile(&ctx, model, oracle, plan, out),
        Command::Fit { model, variant } => commands::fit(&ctx, model, *variant, out),
        Command::Dispatch { model, histogram, row } => commands::dispatch(&ctx, model, histogram, *row, out),
        Command::Evaluate { model, mode, oracle, grid, curve_batch } => {
            commands::evaluate(&ctx, model, *mode, oracle, grid, *curve_batch, out)
        }
        Command::Classify { check } => commands::classify(&ctx, *check, out),
        Command::SampleRouting { model, experts, top_k, batch, beta, count } => {
            let req = commands::RoutingRequest {
                model: model.as_deref(),
                experts: *experts,
                top_k: *top_k,
                batch: *batch,
                beta: *beta,
                count: *count,
            };
            commands::sample_routing(&ctx, &req, out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_spec_forms() {
        assert_eq!("sim".parse::<OracleSpec>().unwrap(), OracleSpec::Sim(None));
        assert_eq!("sim:p.json".parse::<OracleSpec>().unwrap(), OracleSpec::Sim(Some("p.json".into())));
        assert_eq!("trace:t.csv".parse::<OracleSpec>().unwrap(), OracleSpec::Trace("t.csv".into()));
        assert!("trace:".parse::<OracleSpec>().is_err());
        assert!("gpu".parse::<OracleSpec>().is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_with_args(["ramp", "enumerate"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run_with_args(["ramp", "frobnicate"], &mut out, &mut err), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_with_args(["ramp", "--help"], &mut out, &mut err), EXIT_OK);
        assert!(String::from_utf8(out).unwrap().contains("enumerate"));
    }
}
