//! `fairreg` command line: generate a synthetic set, train, audit
//! predictions and search lambda.
//!
//! Settings come from struct defaults, then the `--config` TOML file
//! (`[generate]`, `[train]`, `[sweep]`), then flags. Failures print one
//! `error[<category>]: <message>` line to stderr; usage errors and invalid
//! configuration exit with 2, runtime failures with 1.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub use commands::{DATASET_FILE, HISTORY_FILE, MODEL_FILE};

/// Default for `--data` and `generate --out`.
pub const DATA_DIR_ENV: &str = "FAIRREG_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] fairreg::Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Lib(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(fairreg::Error::Config(_)) => 2,
            CliError::Lib(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fairreg", about = "Group-fairness regularization: data, training, audit and lambda search")]
pub struct Cli {
    /// TOML file with [generate], [train] and [sweep] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More progress output; repeat for per-epoch and per-trial lines.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic biased dataset.
    Generate(GenerateArgs),
    /// Train from scratch, or fine-tune with --init.
    Train(TrainArgs),
    /// Audit a prediction dump.
    Audit(AuditArgs),
    /// Search lambda for one fairness loss.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator spec: a [generate] table or bare top-level keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, env = DATA_DIR_ENV)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub bias_strength: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file, or a directory holding dataset.csv.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data: PathBuf,
    /// Output directory; defaults to the dataset's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model to continue from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub class_weight_beta: Option<f64>,
    /// Hidden width, 0 for a linear model; ignored with --init.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub dump: PathBuf,
    /// soft or hard.
    #[arg(long, default_value = "soft")]
    pub mode: String,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Number of sensitive groups; inferred from the labels otherwise.
    #[arg(long)]
    pub k_s: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, env = DATA_DIR_ENV)]
    pub data: PathBuf,
    /// Trained lambda = 0 model; trained from [train] settings if omitted.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<String>,
    /// ladder or random.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub lambda_low: Option<f64>,
    #[arg(long)]
    pub lambda_high: Option<f64>,
    #[arg(long)]
    pub ladder_ratio: Option<f64>,
    #[arg(long)]
    pub accuracy_floor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_learning_rate: Option<f64>,
}

/// `fairreg --version` text.
pub fn version_text() -> String {
    format!(
        "{}\nmodel format {} v{}\ntraining history v{}\ndataset table v{}\nprediction dump v{}\naudit report v{}\nsweep result v{}",
        env!("CARGO_PKG_VERSION"),
        fairreg::model::MODEL_FORMAT,
        fairreg::model::MODEL_FORMAT_VERSION,
        fairreg::model::HISTORY_FORMAT_VERSION,
        fairreg::data::DATASET_FORMAT_VERSION,
        fairreg::data::DUMP_FORMAT_VERSION,
        fairreg::audit::REPORT_FORMAT_VERSION,
        fairreg::sweep::SWEEP_FORMAT_VERSION,
    )
}

/// Progress output on stderr.
pub(crate) struct Log {
    level: u8,
}

impl Log {
    pub(crate) fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub(crate) fn detail(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub(crate) fn quiet(&self) -> bool {
        self.level == 0
    }
}

pub(crate) fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().version(env!("CARGO_PKG_VERSION")).long_version(&*Box::leak(version_text().into_boxed_str()));
    let cli = match cmd.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return 2;
            }
            report(&CliError::Usage(first_line(&e.to_string())));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_start_matches("error: ")
        .to_string()
}

fn report(e: &CliError) {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.category());
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let log = Log {
        level: if cli.quiet { 0 } else { 1 + cli.verbose },
    };
    let file = match &cli.config {
        Some(p) => {
            require_file(p, "config file")?;
            config::ConfigFile::load(p)?
        }
        None => config::ConfigFile::default(),
    };
    match cli.command {
        Command::Generate(a) => commands::generate(&a, &file, &log),
        Command::Train(a) => commands::train(&a, &file, &log),
        Command::Audit(a) => commands::audit(&a, &log),
        Command::Sweep(a) => commands::sweep(&a, &file, &log),
    }
}
