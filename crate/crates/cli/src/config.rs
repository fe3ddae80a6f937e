//! Optional `planout.toml`:
//!
//! ```toml
//! store = "experiments.jsonl"
//! exposure_log = "exposures.jsonl"   # or "stdout"
//! exposure_log_max_bytes = 104857600
//! exposure_log_keep = 5
//! port = 8080
//! cors_origin = "http://localhost:5173"
//! ```
//!
//! Command-line flags win over the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_FILE: &str = "planout.toml";

#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub store: Option<PathBuf>,
    pub exposure_log: Option<String>,
    pub exposure_log_max_bytes: Option<u64>,
    pub exposure_log_keep: Option<usize>,
    pub port: Option<u16>,
    pub cors_origin: Option<String>,
}

impl Config {
    /// Reads `explicit` if given, else `planout.toml` in the working
    /// directory if it exists, else the empty config.
    pub fn load(explicit: Option<&Path>) -> Result<Config, CliError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = PathBuf::from(DEFAULT_FILE);
                if !p.exists() {
                    return Ok(Config::default());
                }
                p
            }
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
    }
}
