//! Option resolution. Every knob is settled the same way: a command-line
//! flag wins, then its TCX_* environment variable (clap folds those two
//! together), then the config file, then the built-in default.

use std::path::{Path, PathBuf};

use crate::{Cli, Failure};

const DEFAULT_CONFIG: &str = "tcx.toml";
const DEFAULT_STATE_DIR: &str = "tcx-state";
const DEFAULT_HOST: &str = "host-a";
const DEFAULT_DEPLOY: &str = "deploy";
const ENDPOINTS_FILE: &str = "endpoints.net";

/// The settled values every subcommand works from.
pub struct Settings {
    pub state_dir: PathBuf,
    pub endpoints: PathBuf,
    pub host: String,
    pub deploy: String,
}

pub fn resolve(cli: &Cli) -> Result<Settings, Failure> {
    let table = load_table(cli.config.as_deref())?;
    let from_file = |key: &str| -> Option<String> {
        table
            .as_ref()
            .and_then(|t| t.get(key))
            .and_then(|v| v.as_str())
            .map(|s| s.to_string())
    };

    // Reject typos instead of silently ignoring them.
    if let Some(t) = &table {
        for key in t.keys() {
            if !["state_dir", "endpoints", "host", "deploy"].contains(&key.as_str()) {
                return Err(Failure::Usage(format!("unknown config key {key:?}")));
            }
        }
    }

    let state_dir = cli
        .state_dir
        .clone()
        .or_else(|| from_file("state_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STATE_DIR));
    let endpoints = cli
        .endpoints
        .clone()
        .or_else(|| from_file("endpoints").map(PathBuf::from))
        .unwrap_or_else(|| state_dir.join(ENDPOINTS_FILE));
    let host = cli
        .host
        .clone()
        .or_else(|| from_file("host"))
        .unwrap_or_else(|| DEFAULT_HOST.to_string());
    let deploy = cli
        .deploy
        .clone()
        .or_else(|| from_file("deploy"))
        .unwrap_or_else(|| DEFAULT_DEPLOY.to_string());

    Ok(Settings { state_dir, endpoints, host, deploy })
}

/// Reads the config file. A path given explicitly must exist; the
/// default location is allowed to be absent.
fn load_table(explicit: Option<&Path>) -> Result<Option<toml::Table>, Failure> {
    let (path, required) = match explicit {
        Some(p) => (p.to_path_buf(), true),
        None => (PathBuf::from(DEFAULT_CONFIG), false),
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(_) if !required => return Ok(None),
        Err(e) => {
            return Err(Failure::Usage(format!(
                "cannot read config {}: {e}",
                path.display()
            )))
        }
    };
    let table: toml::Table = text
        .parse()
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    for (key, value) in &table {
        if !value.is_str() {
            return Err(Failure::Usage(format!(
                "config {}: key {key:?} must be a string",
                path.display()
            )));
        }
    }
    Ok(Some(table))
}
