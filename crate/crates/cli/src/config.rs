//! Optional TOML config file. Each experiment reads its own table; a
//! flag given on the command line always wins over the file, and the
//! file wins over the built-in defaults.
//!
//! ```toml
//! [movielens]
//! steps = 500
//! lr = 0.0001
//!
//! [health]
//! splits = 50
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use flowtrace_core::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub movielens: MovielensConfig,
    #[serde(default)]
    pub health: HealthConfig,
    #[serde(default)]
    pub prop1: Prop1Config,
    #[serde(default)]
    pub flowvar: FlowvarConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovielensConfig {
    pub data: Option<PathBuf>,
    pub splits: Option<usize>,
    pub repeats: Option<usize>,
    pub train_fraction: Option<f64>,
    pub dim: Option<usize>,
    pub lambda: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealthConfig {
    pub data: Option<PathBuf>,
    pub splits: Option<usize>,
    pub train_fraction: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Config {
    pub trials: Option<usize>,
    pub individuals: Option<usize>,
    pub points_per_batch: Option<usize>,
    pub steps: Option<usize>,
    pub deploy_size: Option<usize>,
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowvarConfig {
    pub data: Option<PathBuf>,
    pub individuals: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
}

pub fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
}
