//! Optional JSON config file. Flags override it, it overrides built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const DATA_DIR_ENV: &str = "SYNCHRODAQ_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "synchrodaq-data";
pub const GROUND_TRUTH_DIR: &str = "ground_truth";
pub const CALIB_DIR: &str = "calib";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub ingest_port: Option<u16>,
    pub ws_port: Option<u16>,
    pub server: Option<String>,
    pub seed: Option<u64>,
    pub trials: Option<u32>,
    pub rate: Option<f64>,
    pub folds: Option<usize>,
    pub epochs: Option<usize>,
    pub gt: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// First of flag, config value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag, then config file, then `SYNCHRODAQ_DATA_DIR`, then `./synchrodaq-data`.
pub fn data_dir(flag: Option<PathBuf>, file: &FileConfig) -> PathBuf {
    flag.or_else(|| file.data_dir.clone())
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}
