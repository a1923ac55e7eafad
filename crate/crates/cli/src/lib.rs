//! `synchrodaq` command line: serve, simulate, align, calibrate, evaluate, export.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use synchrodaq_core::Error as CoreError;
use synchrodaq_server::ServerError;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Validation(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Validation(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::Core(c) => c.into(),
            ServerError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "synchrodaq",
    version,
    about = "Synchronized multimodal surgical data acquisition"
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root of recorded sessions [env: SYNCHRODAQ_DATA_DIR].
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the acquisition server until interrupted.
    Serve(ServeArgs),
    /// Drive simulated sensor clients against a running server.
    Sim(SimArgs),
    /// Align recorded sessions onto their video clock and write trial tables.
    Align(AlignArgs),
    /// Fit rigid and residual maps plus pedal thresholds from recorded sessions.
    Calibrate(CalibrateArgs),
    /// Run the validation metric suite and write reports.
    Eval(EvalArgs),
    /// Export aligned trials as a dataset.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Control socket port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub ingest_port: Option<u16>,
    /// WebSocket bridge port.
    #[arg(long)]
    pub ws_port: Option<u16>,
    /// Disable the WebSocket bridge.
    #[arg(long)]
    pub no_ws: bool,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scenario config (JSON); built-in defaults when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Control socket address.
    #[arg(long)]
    pub server: Option<String>,
    /// Ingestion socket address; defaults to the control host at the ingest port.
    #[arg(long)]
    pub ingest: Option<String>,
    /// Send as fast as acknowledgements allow (default).
    #[arg(long, conflicts_with = "realtime")]
    pub replay: bool,
    /// Pace every stream on the wall clock.
    #[arg(long)]
    pub realtime: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Consecutive trials; trial `k` uses seed `seed + k - 1`.
    #[arg(long)]
    pub trials: Option<u32>,
    #[arg(long, default_value = "SIM")]
    pub subject: String,
    #[arg(long, default_value = "peg-transfer")]
    pub task: String,
    /// Number of the first trial.
    #[arg(long, default_value_t = 1)]
    pub first_trial: u32,
    /// Where to write ground truth (default `<data-dir>/ground_truth`).
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Session directory or name under the data dir; repeatable. Default: every session.
    #[arg(long)]
    pub session: Vec<PathBuf>,
    /// Gesture segments CSV, or a directory of `<session>.labels.csv` files.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output rate in Hz; must divide the master rate.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Drop frames where the clutch pedal is pressed.
    #[arg(long)]
    pub mask_clutch: bool,
    /// Calibration directory whose pedal thresholds are applied.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Output directory (default `<session>/aligned`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub session: Vec<PathBuf>,
    /// Ground-truth directory (default `<data-dir>/ground_truth`).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Comma-separated: emht, handkp, pss.
    #[arg(long, default_value = "emht,handkp,pss")]
    pub pairs: String,
    /// Robot frame: M, P or both as `M,P`.
    #[arg(long, default_value = "M")]
    pub target: String,
    /// Cross-validation folds; default one per trial.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default `<data-dir>/calib`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub session: Vec<PathBuf>,
    /// Calibration directory (default `<data-dir>/calib`).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Report directory (default `<data-dir>/reports`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grasper distance threshold in cm.
    #[arg(long)]
    pub grasper_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub session: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "csv")]
    pub format: String,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub mask_clutch: bool,
    #[arg(long)]
    pub calib: Option<PathBuf>,
}

/// Parses `args` and runs the chosen subcommand.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => config::FileConfig::load(p)?,
        None => config::FileConfig::default(),
    };
    let data_dir = config::data_dir(cli.data_dir, &file);
    match cli.command {
        Command::Serve(a) => commands::serve(a, &file, &data_dir),
        Command::Sim(a) => commands::sim(a, &file, &data_dir),
        Command::Align(a) => commands::align(a, &file, &data_dir),
        Command::Calibrate(a) => commands::calibrate(a, &file, &data_dir),
        Command::Eval(a) => commands::eval(a, &file, &data_dir),
        Command::Export(a) => commands::export(a, &file, &data_dir),
    }
}
