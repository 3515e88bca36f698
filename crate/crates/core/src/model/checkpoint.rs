//! Single-file checkpoints: a magic line, a one-line JSON manifest, then a
//! flat little-endian `f32` blob.
//!
//! ```text
//! SLICESR-CKPT\n
//! {"format_version":1,"config":{..},"step":..,"tensors":[{"name":..,"shape":[..],"offset":..}],..}\n
//! <blob: tensors back to back, byte offsets relative to blob start>
//! ```
//!
//! Model parameters are stored as `param/<name>`; optional Adam moments as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, Tvsrn};
use crate::nn::ParamStore;
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "SLICESR-CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint config rejected: {0}")]
    Model(#[from] ModelError),
}

/// Adam moments and step count, parallel to the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerSnapshot {
    pub fn from_state(state: &AdamState<f32>) -> Self {
        let (m, v) = state.moments();
        OptimizerSnapshot {
            config: state.config,
            step: state.step_count(),
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }

    pub fn into_state(self) -> Result<AdamState<f32>, CheckpointError> {
        AdamState::from_parts(self.config, self.step, self.m, self.v)
            .map_err(|e| CheckpointError::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Completed training steps.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerSnapshot>,
    /// Free-form metadata (e.g. the training configuration).
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    step: u64,
    optimizer: Option<OptimizerMeta>,
    extra: serde_json::Value,
    blob_bytes: u64,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(ckpt: &Checkpoint, mut w: impl Write) -> Result<(), CheckpointError> {
    let names = ckpt.params.names();
    let mut ordered: Vec<(String, &Tensor<f32>)> = names
        .iter()
        .zip(ckpt.params.tensors())
        .map(|(n, t)| (format!("param/{n}"), t))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != names.len() || opt.v.len() != names.len() {
            return Err(CheckpointError::Format(
                "optimizer moments do not match parameter count".into(),
            ));
        }
        ordered.extend(
            names
                .iter()
                .zip(&opt.m)
                .map(|(n, t)| (format!("adam.m/{n}"), t)),
        );
        ordered.extend(
            names
                .iter()
                .zip(&opt.v)
                .map(|(n, t)| (format!("adam.v/{n}"), t)),
        );
    }
    let mut offset = 0u64;
    let tensors = ordered
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        step: ckpt.step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerMeta {
            config: o.config,
            step: o.step,
        }),
        extra: ckpt.extra.clone(),
        blob_bytes: offset,
        tensors,
    };
    let header =
        serde_json::to_string(&manifest).map_err(|e| CheckpointError::Format(e.to_string()))?;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{header}")?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, t) in &ordered {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(CheckpointError::Format("bad magic line".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    // Peek at the version before strict parsing so newer formats report a
    // version error rather than a schema error.
    let loose: serde_json::Value = serde_json::from_str(&line)
        .map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
    let found = loose
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(loose)
        .map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(CheckpointError::Format(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }

    let mut table: HashMap<&str, &TensorEntry> = HashMap::new();
    for e in &manifest.tensors {
        if table.insert(e.name.as_str(), e).is_some() {
            return Err(CheckpointError::Format(format!(
                "duplicate tensor {:?}",
                e.name
            )));
        }
    }
    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let e = table
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        if e.shape != shape {
            return Err(CheckpointError::Format(format!(
                "tensor {name:?} has shape {:?}, architecture expects {shape:?}",
                e.shape
            )));
        }
        let n: usize = shape.iter().product();
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + 4 * n)
            .ok_or_else(|| CheckpointError::Format(format!("tensor {name:?} exceeds blob")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| CheckpointError::Format(e.to_string()))
    };

    let model = Tvsrn::new(manifest.config.clone())?;
    let specs = model.param_specs();
    let params = specs
        .iter()
        .map(|s| fetch(&format!("param/{}", s.name), &s.shape))
        .collect::<Result<Vec<_>, _>>()?;
    let params = ParamStore::from_tensors(specs, params)
        .ok_or_else(|| CheckpointError::Format("parameter layout mismatch".into()))?;
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(meta) => {
            let moments = |prefix: &str| {
                specs
                    .iter()
                    .map(|s| fetch(&format!("{prefix}/{}", s.name), &s.shape))
                    .collect::<Result<Vec<_>, _>>()
            };
            Some(OptimizerSnapshot {
                config: meta.config,
                step: meta.step,
                m: moments("adam.m")?,
                v: moments("adam.v")?,
            })
        }
    };
    let expected = specs.len() * if optimizer.is_some() { 3 } else { 1 };
    if manifest.tensors.len() != expected {
        return Err(CheckpointError::Format(format!(
            "{} tensors stored, architecture accounts for {expected}",
            manifest.tensors.len()
        )));
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        params,
        optimizer,
        extra: manifest.extra,
    })
}

/// Writes atomically: a temporary sibling file is renamed over `path` only
/// after the full checkpoint has been written.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    crate::io_util::write_atomic(path.as_ref(), |f| {
        let mut w = BufWriter::new(f);
        write_checkpoint(ckpt, &mut w)?;
        w.flush()?;
        Ok(())
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(File::open(path)?)
}
