//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `PSCKPT01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the concatenated little-endian `f32` payloads of
//! every named tensor. The header carries the topology descriptor, seed,
//! epoch, free-form metadata and a tensor directory (name, shape, offset, len
//! in elements).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{NetworkError, SegmentationNetwork};
use super::params::Grads;
use crate::topology::TopologyDescriptor;

const MAGIC: &[u8; 8] = b"PSCKPT01";
const FORMAT: &str = "planseg-checkpoint";
pub const MOMENTUM_PREFIX: &str = "optimizer.momentum.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: TopologyDescriptor,
    pub seed: u64,
    pub epoch: usize,
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    descriptor: TopologyDescriptor,
    seed: u64,
    epoch: usize,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_network(
        net: &SegmentationNetwork<f32>,
        epoch: usize,
        momentum: Option<&Grads<f32>>,
        metadata: serde_json::Value,
    ) -> Self {
        let mut tensors: Vec<NamedTensor> = net
            .params()
            .entries()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
            .collect();
        if let Some(m) = momentum {
            for (p, buf) in net.params().entries().iter().zip(&m.data) {
                tensors.push(NamedTensor {
                    name: format!("{MOMENTUM_PREFIX}{}", p.name),
                    shape: p.shape.clone(),
                    data: buf.clone(),
                });
            }
        }
        Self {
            descriptor: net.descriptor().clone(),
            seed: net.seed(),
            epoch,
            metadata,
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuild the network and load every parameter by name.
    pub fn restore_network(&self) -> Result<SegmentationNetwork<f32>, CheckpointError> {
        let mut net = SegmentationNetwork::<f32>::build(&self.descriptor, self.seed)?;
        for p in net.params_mut().entries_mut() {
            let t = self
                .tensor(&p.name)
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {}", p.name)))?;
            if t.shape != p.shape {
                return Err(CheckpointError::Format(format!("shape mismatch for {}", p.name)));
            }
            p.data.copy_from_slice(&t.data);
        }
        Ok(net)
    }

    /// Optimizer momentum buffers laid out like `net`'s parameters, if stored.
    pub fn momentum(&self, net: &SegmentationNetwork<f32>) -> Result<Option<Grads<f32>>, CheckpointError> {
        if !self.tensors.iter().any(|t| t.name.starts_with(MOMENTUM_PREFIX)) {
            return Ok(None);
        }
        let data = net
            .params()
            .entries()
            .iter()
            .map(|p| {
                self.tensor(&format!("{MOMENTUM_PREFIX}{}", p.name))
                    .map(|t| t.data.clone())
                    .ok_or_else(|| CheckpointError::Format(format!("missing momentum for {}", p.name)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Some(Grads { data }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = Header {
            format: FORMAT.into(),
            descriptor: self.descriptor.clone(),
            seed: self.seed,
            epoch: self.epoch,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| CheckpointError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format != FORMAT {
            return Err(CheckpointError::Format(format!("unknown format tag {}", header.format)));
        }
        let payload = &bytes[16 + hlen..];
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let start = e.offset * 4;
                let end = start + e.len * 4;
                let raw = payload
                    .get(start..end)
                    .ok_or_else(|| CheckpointError::Format(format!("truncated tensor {}", e.name)))?;
                if e.shape.iter().product::<usize>() != e.len {
                    return Err(CheckpointError::Format(format!("shape/len mismatch for {}", e.name)));
                }
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Ok(NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect::<Result<_, CheckpointError>>()?;
        Ok(Self {
            descriptor: header.descriptor,
            seed: header.seed,
            epoch: header.epoch,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
