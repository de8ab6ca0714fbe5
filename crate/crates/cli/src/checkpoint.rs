//! Versioned checkpoints of model weights and optimizer state.
//!
//! Layout: the magic `MODALFUSE1`, a little-endian `u64` header length, a
//! JSON header (config snapshot, step, fingerprint, manifest of named
//! tensors with shapes and byte offsets, optimizer step counters), the
//! payload of little-endian `f32` values, and a trailing `u64` FNV-1a
//! checksum of the payload.

use std::fs;
use std::path::Path;

use modalfuse::eval::fnv1a;
use modalfuse::model::FusedModel;
use modalfuse::train::{AdamState, Trainer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::fsio::write_atomic;

pub const MAGIC: &[u8; 10] = b"MODALFUSE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a modalfuse checkpoint (magic {found:?}, expected \"MODALFUSE1\")")]
    BadMagic { found: String },
    #[error("checkpoint checksum failed: {0}")]
    Checksum(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor `{name}` has shape {found:?} in the checkpoint, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor `{0}`")]
    Missing(String),
    #[error("checkpoint has tensor `{0}` that the model does not")]
    Unexpected(String),
    #[error("checkpoint fingerprint {checkpoint} does not match config fingerprint {config}")]
    Fingerprint { checkpoint: String, config: String },
    #[error("refusing to save non-finite tensor `{0}`")]
    NonFinite(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    step: u64,
    config: String,
    tensors: Vec<ManifestEntry>,
    adam_t: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub step: u64,
    /// Rendered effective configuration of the run.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    /// Update counter per parameter name.
    pub adam_t: Vec<(String, u64)>,
}

fn moment_name(kind: &str, param: &str) -> String {
    format!("adam.{kind}.{param}")
}

impl Checkpoint {
    /// Weights, then first and second moments, in parameter order.
    pub fn capture(trainer: &Trainer<f32>, cfg: &RunConfig) -> Checkpoint {
        let params = trainer.model.params();
        let mut tensors: Vec<NamedTensor> = params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        for (kind, moments) in [("m", &trainer.opt.m), ("v", &trainer.opt.v)] {
            for (p, data) in params.iter().zip(moments) {
                tensors.push(NamedTensor {
                    name: moment_name(kind, &p.name),
                    shape: p.tensor.shape().to_vec(),
                    data: data.clone(),
                });
            }
        }
        Checkpoint {
            fingerprint: cfg.fingerprint(),
            step: trainer.step,
            config: cfg.portable().render(),
            tensors,
            adam_t: params.iter().zip(&trainer.opt.t).map(|(p, &t)| (p.name.clone(), t)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut payload = Vec::new();
        let mut manifest = Vec::new();
        for t in &self.tensors {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(CheckpointError::NonFinite(t.name.clone()));
            }
            manifest.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: payload.len() as u64,
            });
            for x in &t.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            step: self.step,
            config: self.config.clone(),
            tensors: manifest,
            adam_t: self.adam_t.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            let n = bytes.len().min(MAGIC.len());
            return Err(CheckpointError::BadMagic {
                found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
            });
        }
        let truncated = |what: &str| CheckpointError::Checksum(format!("file truncated inside the {what}"));
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] = rest.get(..8).ok_or_else(|| truncated("header"))?.try_into().unwrap();
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = rest.get(8..8usize.saturating_add(header_len)).ok_or_else(|| truncated("header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let body = &rest[8 + header_len..];
        let payload_len: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if body.len() != payload_len + 8 {
            return Err(CheckpointError::Checksum(format!(
                "payload is {} bytes, manifest and checksum need {}",
                body.len(),
                payload_len + 8
            )));
        }
        let (payload, tail) = body.split_at(payload_len);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a(payload);
        if stored != computed {
            return Err(CheckpointError::Checksum(format!(
                "stored {stored:016x}, computed {computed:016x}"
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if tensors.iter().any(|t: &NamedTensor| t.name == e.name) {
                return Err(CheckpointError::Header(format!("duplicate tensor `{}`", e.name)));
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::Header(format!("tensor `{}` has offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let data = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset += 4 * n as u64;
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            fingerprint: header.fingerprint,
            step: header.step,
            config: header.config,
            tensors,
            adam_t: header.adam_t,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), crate::error::CliError> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }

    /// The configuration stored with the checkpoint.
    pub fn run_config(&self) -> Result<RunConfig, CheckpointError> {
        RunConfig::parse(&self.config, "checkpoint config").map_err(|e| CheckpointError::Header(e.to_string()))
    }

    fn take(&self, name: &str, expected: &[usize]) -> Result<&[f32], CheckpointError> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape != expected {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(&t.data)
    }

    /// Rebuilds the trainer for `cfg`, checking every tensor against the
    /// model that `cfg` describes.
    pub fn restore(&self, cfg: &RunConfig) -> Result<Trainer<f32>, CheckpointError> {
        let core = |e: modalfuse::Error| CheckpointError::Header(e.to_string());
        let mut model = FusedModel::<f32>::init(&cfg.model, 0, None).map_err(core)?;
        let mut opt = AdamState::new(model.params());
        let mut known = Vec::new();
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let shape = p.tensor.shape().to_vec();
            p.tensor.data_mut().copy_from_slice(self.take(&p.name, &shape)?);
            opt.m[i].copy_from_slice(self.take(&moment_name("m", &p.name), &shape)?);
            opt.v[i].copy_from_slice(self.take(&moment_name("v", &p.name), &shape)?);
            opt.t[i] = self
                .adam_t
                .iter()
                .find(|(n, _)| *n == p.name)
                .map(|&(_, t)| t)
                .ok_or_else(|| CheckpointError::Missing(format!("adam.t.{}", p.name)))?;
            known.push(p.name.clone());
            known.push(moment_name("m", &p.name));
            known.push(moment_name("v", &p.name));
        }
        if let Some(extra) = self.tensors.iter().find(|t| !known.contains(&t.name)) {
            return Err(CheckpointError::Unexpected(extra.name.clone()));
        }
        Trainer::resume(model, opt, self.step, cfg.train.clone()).map_err(core)
    }
}
