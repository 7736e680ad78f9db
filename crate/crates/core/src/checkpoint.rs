//! Binary checkpoint format.
//!
//! Layout: the 6 magic bytes `SFLOW1`, a little-endian `u64` byte length,
//! that many bytes of JSON metadata, then every tensor listed in the
//! metadata manifest as little-endian `f64` values, in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dmv::DmvParams;
use crate::emission::EmissionParams;
use crate::error::{CheckpointError, Result};
use crate::flow::{FlowKind, FlowParams};
use crate::markov::MarkovParams;
use crate::model::{ModelParams, ModelSpec, Prior, Task};
use crate::optim::Adam;
use crate::params::Tensors;
use crate::transfer::TransferConfig;

pub const MAGIC: &[u8; 6] = b"SFLOW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config: TransferConfig,
    pub seed: u64,
    pub dev_metric: Option<f64>,
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    version: u32,
    spec: ModelSpec,
    coupling_hidden: usize,
    config: TransferConfig,
    seed: u64,
    dev_metric: Option<f64>,
    /// Present when optimizer moments follow the model tensors.
    adam_step: Option<u64>,
    tensor_count: usize,
    tensors: Vec<TensorEntry>,
}

/// Zero-valued parameters with the layout implied by `spec`.
pub fn skeleton(spec: &ModelSpec, coupling_hidden: usize) -> Result<ModelParams> {
    spec.validate()?;
    let k = spec.num_categories;
    let dim = spec.dim();
    let prior = match spec.task {
        Task::Tag => Prior::Markov(MarkovParams::uniform(k)),
        Task::Parse => Prior::Dmv(DmvParams::uniform(k)),
    };
    let flow = match spec.flow {
        FlowKind::Identity => FlowParams::identity(dim),
        FlowKind::Linear => FlowParams::Linear {
            weight: Array2::zeros((dim, dim)),
        },
        FlowKind::Nice => FlowParams::nice_zeros(dim, spec.coupling_layers, coupling_hidden)?,
    };
    Ok(ModelParams {
        prior,
        emission: EmissionParams::zeros(k, dim),
        flow,
        tag_embeddings: (spec.tag_dim > 0).then(|| Array2::zeros((k, spec.tag_dim))),
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest: Vec<TensorEntry> = self
            .params
            .tensors()
            .into_iter()
            .map(|t| TensorEntry {
                name: t.name,
                shape: t.shape,
            })
            .collect();
        let model_tensors = manifest.len();
        if let Some(adam) = &self.optimizer {
            for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
                for (entry, buf) in manifest[..model_tensors].to_vec().iter().zip(moments) {
                    debug_assert_eq!(entry.shape.iter().product::<usize>(), buf.len());
                    manifest.push(TensorEntry {
                        name: format!("{prefix}{}", entry.name),
                        shape: entry.shape.clone(),
                    });
                }
            }
        }
        let meta = Metadata {
            version: FORMAT_VERSION,
            spec: self.spec.clone(),
            coupling_hidden: self.params.flow.hidden(),
            config: self.config.clone(),
            seed: self.seed,
            dev_metric: self.dev_metric,
            adam_step: self.optimizer.as_ref().map(|a| a.step),
            tensor_count: manifest.len(),
            tensors: manifest,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut out = Vec::with_capacity(14 + json.len() + 8 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |data: &[f64]| {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for t in self.params.tensors() {
            put(t.data);
        }
        if let Some(adam) = &self.optimizer {
            for buf in adam.m.iter().chain(&adam.v) {
                put(buf);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut reader = Reader { bytes, pos: 0 };
        let magic = reader.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let len = u64::from_le_bytes(reader.take(8, "metadata length")?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated("metadata"))?;
        let json = reader.take(len, "metadata")?;
        let value: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Metadata("missing version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch {
                found: version as u32,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let meta: Metadata =
            serde_json::from_value(value).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        if meta.tensor_count != meta.tensors.len() {
            return Err(CheckpointError::TensorCountMismatch {
                expected: meta.tensor_count,
                found: meta.tensors.len(),
            }
            .into());
        }

        let mut params = skeleton(&meta.spec, meta.coupling_hidden)?;
        let model_tensors = params.tensors().len();
        let expected = model_tensors * if meta.adam_step.is_some() { 3 } else { 1 };
        if meta.tensors.len() != expected {
            return Err(CheckpointError::TensorCountMismatch {
                expected,
                found: meta.tensors.len(),
            }
            .into());
        }
        for (slot, entry) in params.tensors_mut().into_iter().zip(&meta.tensors) {
            if slot.name != entry.name || slot.shape != entry.shape {
                return Err(CheckpointError::Manifest(format!(
                    "expected {} {:?}, found {} {:?}",
                    slot.name, slot.shape, entry.name, entry.shape
                ))
                .into());
            }
            reader.read_f64s(slot.data)?;
        }
        let optimizer = match meta.adam_step {
            None => None,
            Some(step) => {
                let mut adam = Adam::new(&params);
                adam.step = step;
                let entries = &meta.tensors[model_tensors..];
                for (entry, buf) in entries.iter().zip(adam.m.iter_mut().chain(adam.v.iter_mut())) {
                    if entry.shape.iter().product::<usize>() != buf.len() {
                        return Err(CheckpointError::Manifest(format!(
                            "optimizer tensor {} has the wrong size",
                            entry.name
                        ))
                        .into());
                    }
                    reader.read_f64s(buf)?;
                }
                Some(adam)
            }
        };
        if reader.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - reader.pos).into());
        }
        params.validate()?;
        params.flow.check_invertible()?;
        Ok(Checkpoint {
            spec: meta.spec,
            config: meta.config,
            seed: meta.seed,
            dev_metric: meta.dev_metric,
            params,
            optimizer,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn read_f64s(&mut self, dst: &mut [f64]) -> std::result::Result<(), CheckpointError> {
        let raw = self.take(dst.len() * 8, "tensor data")?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}
