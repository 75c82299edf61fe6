//! Run configuration: one TOML file plus `--set section.key=value` overrides.
//!
//! ```toml
//! seed = 7
//! [model]
//! n_layers = 4
//! [train]
//! phase1_steps = 2000
//! [sampler]
//! cfg_scale = 1.25
//! [score]
//! sigma_time = 4.0
//! [data]
//! frame_rate_hz = 50.0
//! ```
//!
//! Every section and key is optional. The top-level `seed` drives all
//! randomness; `train.seed` is always replaced by it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::flow::{SamplerConfig, TrainConfig};
use crate::io::read_to_string;
use crate::net::ModelConfig;
use crate::score::ScoreConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Model frame rate; inputs at other rates are resampled to it.
    pub frame_rate_hz: f64,
    /// Length of synthesized examples.
    pub n_frames: usize,
    /// Frame rate assumed for CSV pitch files, which do not carry one.
    pub csv_frame_rate_hz: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frame_rate_hz: 50.0,
            n_frames: 1024,
            csv_frame_rate_hz: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub score: ScoreConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        for (name, v) in [
            ("data.frame_rate_hz", self.data.frame_rate_hz),
            ("data.csv_frame_rate_hz", self.data.csv_frame_rate_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.data.n_frames == 0 {
            return Err(Error::InvalidArgument("data.n_frames must be positive".into()));
        }
        Ok(())
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let bad = || Error::parse("--set", format!("expected section.key=value, got `{raw}`"));
    let (key, value) = raw.split_once('=').ok_or_else(bad)?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(bad());
    }
    let value = value.trim();
    // TOML literal when it parses as one, bare string otherwise.
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((path, parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::parse("--set", format!("`{key}` is not a section")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Reads the config file (if any), applies overrides in order, then the seed.
pub fn load_run_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = read_to_string(p)?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::parse(p.display().to_string(), e))?
        }
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        apply_override(&mut table, &key, value)?;
    }
    let context = path.map_or_else(|| "configuration".to_owned(), |p| p.display().to_string());
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::parse(context, e.message()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
