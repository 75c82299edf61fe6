//! Checkpoint directory:
//!
//! - `config.json`: model config, training metadata, SHA-256 of each binary file.
//! - `weights.bin`: every parameter as little-endian `f32`, tensors in name order.
//! - `weights.index.json`: name, shape and byte offset of each tensor.
//! - `optimizer.bin` (optional): Adam first then second moments, same order.
//!
//! Loading verifies checksums, sizes and the index against the config, so a
//! truncated or edited checkpoint is rejected instead of silently used.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{Layout, ModelConfig, Parameters};
use crate::io::{read_json, write_bytes, write_json};
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;
const WEIGHTS: &str = "weights.bin";
const INDEX: &str = "weights.index.json";
const OPTIMIZER: &str = "optimizer.bin";
const CONFIG: &str = "config.json";

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Optimizer steps completed.
    pub step: u64,
    pub seed: u64,
    /// Whether any completed step fed the voicing condition to the network.
    pub uses_unvoiced: bool,
    /// Free-form training settings, echoed for reproduction.
    #[serde(default)]
    pub settings: serde_json::Value,
}

/// Adam moments, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub meta: TrainingMeta,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    format: u32,
    model: ModelConfig,
    training: TrainingMeta,
    optimizer_step: Option<u64>,
    sha256: Checksums,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checksums {
    weights: String,
    optimizer: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    dtype: String,
    total_bytes: usize,
    tensors: Vec<IndexEntry>,
}

fn index_for(layout: &Layout) -> IndexFile {
    IndexFile {
        dtype: "f32-le".into(),
        total_bytes: layout.total * 4,
        tensors: layout
            .tensors
            .iter()
            .map(|t| IndexEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                byte_offset: t.offset * 4,
                byte_len: t.len * 4,
            })
            .collect(),
    }
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes the checkpoint into `dir`, replacing any previous contents. Files
/// are staged in a sibling directory and moved into place at the end.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    if !ckpt.params.is_finite() {
        return Err(Error::Numeric("refusing to save non-finite parameters".into()));
    }
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let weights = to_bytes(&ckpt.params.data);
    write_bytes(&staging.join(WEIGHTS), &weights)?;
    write_json(&staging.join(INDEX), &index_for(&ckpt.params.layout))?;
    let optimizer_sha = match &ckpt.optimizer {
        Some(opt) => {
            let mut bytes = to_bytes(&opt.m);
            bytes.extend(to_bytes(&opt.v));
            write_bytes(&staging.join(OPTIMIZER), &bytes)?;
            Some(sha256_hex(&bytes))
        }
        None => None,
    };
    let config = ConfigFile {
        format: FORMAT_VERSION,
        model: ckpt.params.config,
        training: ckpt.meta.clone(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        sha256: Checksums {
            weights: sha256_hex(&weights),
            optimizer: optimizer_sha,
        },
    };
    write_json(&staging.join(CONFIG), &config)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

fn corrupt(dir: &Path, msg: impl std::fmt::Display) -> Error {
    Error::CorruptCheckpoint(format!("{}: {msg}", dir.display()))
}

fn read_verified(dir: &Path, file: &str, expected_sha: &str, expected_len: usize) -> Result<Vec<u8>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected_len {
        return Err(corrupt(dir, format!("{file} holds {} bytes, expected {expected_len}", bytes.len())));
    }
    if sha256_hex(&bytes) != expected_sha {
        return Err(corrupt(dir, format!("{file} checksum mismatch")));
    }
    Ok(bytes)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config: ConfigFile = read_json(&dir.join(CONFIG)).map_err(|e| match e {
        Error::Parse { message, .. } => corrupt(dir, format!("{CONFIG}: {message}")),
        other => other,
    })?;
    if config.format != FORMAT_VERSION {
        return Err(corrupt(dir, format!("unsupported format version {}", config.format)));
    }
    config.model.validate().map_err(|e| corrupt(dir, e))?;
    let mut params = Parameters::<f32>::zeros(config.model)?;
    let index: IndexFile = read_json(&dir.join(INDEX)).map_err(|e| corrupt(dir, e))?;
    let expected = index_for(&params.layout);
    if index.dtype != expected.dtype || index.total_bytes != expected.total_bytes || index.tensors != expected.tensors {
        return Err(corrupt(dir, format!("{INDEX} does not match the model config")));
    }
    let total = params.layout.total * 4;
    let weights = read_verified(dir, WEIGHTS, &config.sha256.weights, total)?;
    params.data = from_bytes(&weights);
    if !params.is_finite() {
        return Err(corrupt(dir, "non-finite weights"));
    }
    let optimizer = match (&config.sha256.optimizer, config.optimizer_step) {
        (Some(sha), Some(step)) => {
            let bytes = read_verified(dir, OPTIMIZER, sha, 2 * total)?;
            let (m, v) = bytes.split_at(total);
            Some(AdamState {
                step,
                m: from_bytes(m),
                v: from_bytes(v),
            })
        }
        (None, None) => None,
        _ => return Err(corrupt(dir, "optimizer checksum and step must both be present")),
    };
    Ok(Checkpoint {
        params,
        meta: config.training,
        optimizer,
    })
}
