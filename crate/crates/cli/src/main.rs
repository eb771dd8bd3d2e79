//! `contamina`: simulate panels, fit gap estimators, run diagnostics and
//! Monte Carlo checks, and replicate published arithmetic.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 estimation
//! error, 4 mismatch against a reference or closed form.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "contamina", version, about = "Measurement-error contamination of conditional SES gaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutDir {
    /// Output directory (created if missing).
    #[arg(long = "out", env = "CONTAMINA_OUT", default_value = "contamina-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic panel and its hidden-truth sidecar.
    Simulate {
        /// JSON generator configuration.
        config: PathBuf,
        /// Panel CSV to write; `<stem>_truth.csv` is written next to it.
        out: PathBuf,
    },
    /// Estimate the SES gap with one or all strategies.
    Fit(FitArgs),
    /// Score-change diagnostics.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo comparison against closed-form limits.
    Mc(McArgs),
    /// Recompute derivable published numbers from the reported coefficients.
    PaperCheck(CheckArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyChoice {
    Ols,
    Iv,
    EivFs,
    EivTh,
    All,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Panel CSV.
    pub input: PathBuf,
    #[arg(long, default_value = "outcome")]
    pub outcome: String,
    /// SES column: `ses` (standardized within cohort) or `ses_raw`.
    #[arg(long, default_value = "ses")]
    pub ses: String,
    #[arg(long, value_enum, default_value_t = StrategyChoice::All)]
    pub strategy: StrategyChoice,
    /// Polynomial degree of the reliability forecast.
    #[arg(long, default_value_t = 1)]
    pub degree: usize,
    #[arg(long, default_value = "school_id")]
    pub cluster: String,
    /// Fail on the first strategy error instead of recording it.
    #[arg(long)]
    pub strict: bool,
    /// Weight the reliability forecast by inverse squared standard errors.
    #[arg(long)]
    pub weighted: bool,
    /// Fit every lag of the reliability series on one common sample.
    #[arg(long)]
    pub common_sample: bool,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Panel CSV. Omit when `--config` is given.
    #[arg(required_unless_present = "config")]
    pub input: Option<PathBuf>,
    /// Simulate from this generator configuration instead of reading a CSV;
    /// adds the latent variance checks.
    #[arg(long, conflicts_with = "input")]
    pub config: Option<PathBuf>,
    /// Comma-separated characteristics; defaults to SES plus every extra column.
    #[arg(long, value_delimiter = ',')]
    pub characteristics: Vec<String>,
    #[arg(long, default_value = "ses")]
    pub ses: String,
    #[arg(long, default_value = "school_id")]
    pub cluster: String,
    #[arg(long, default_value_t = 0.01)]
    pub significance: f64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct McArgs {
    /// JSON experiment configuration.
    pub config: PathBuf,
    /// Replication count (overrides the configuration).
    #[arg(short = 'R', long = "replications")]
    pub replications: Option<usize>,
    /// Negative control: replace the medium-regression SES prediction with
    /// the true gap, which a working engine must reject.
    #[arg(long)]
    pub self_test: bool,
    /// Run replications on one thread.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Replacement constants file (same schema as the embedded one).
    #[arg(long)]
    pub constants: Option<PathBuf>,
    /// Share tolerance in percentage points.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Absolute tolerance on coefficients.
    #[arg(long)]
    pub coef_tolerance: Option<f64>,
    /// Also write the JSON report to the output directory.
    #[arg(long)]
    pub write: bool,
    #[command(flatten)]
    pub out: OutDir,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::Fit(args) => commands::fit(&args),
        Command::Diagnose(args) => commands::diagnose(&args),
        Command::Mc(args) => commands::mc(&args),
        Command::PaperCheck(args) => commands::reference(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Mismatch(m) => write!(f, "{m}"),
        }
    }
}
