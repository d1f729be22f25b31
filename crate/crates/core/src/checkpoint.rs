//! Binary container for named tensors plus JSON metadata.
//!
//! Layout: the 8-byte magic `MEMIMLCK`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor's values as little-endian `f64` in
//! header order. The header lists `{name, shape, offset, len}` per tensor
//! (offset and len counted in values) and carries free-form metadata.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metalearn::{Learner, MetaConfig, MetaError, TargetSpec};
use crate::nets::KeyNetwork;
use crate::numgrad::{GradError, ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"MEMIMLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tensors: Vec<Entry>,
    metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamSet,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.numel(),
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            tensors,
            metadata: self.metadata.clone(),
        })
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in self.tensors.iter() {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| CheckpointError::Corrupt("header length".into()))?;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() % 8 != 0 {
            return Err(CheckpointError::Corrupt("data section is not a whole number of values".into()));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = ParamSet::new();
        for e in header.tensors {
            let data = values
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{}` out of bounds", e.name)))?;
            tensors.insert(e.name, Tensor::new(e.shape, data.to_vec())?)?;
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(std::io::BufReader::new(File::open(path)?))
    }
}

const THETA: &str = "theta/";
const OMEGA: &str = "omega/";
const KEY: &str = "key/";
const VALUE: &str = "value/";

fn key_net_from(set: &ParamSet) -> Result<KeyNetwork, CheckpointError> {
    Ok(KeyNetwork::from_params(set.require("key.w")?.clone(), set.require("key.b")?.clone())
        .map_err(MetaError::from)?)
}

/// Packs the learner's parameters and frozen networks. `metadata` should
/// carry the resolved configuration and seed.
pub fn learner_checkpoint(learner: &Learner, metadata: serde_json::Value) -> Checkpoint {
    let mut tensors: ParamSet = learner
        .theta()
        .prefixed(THETA)
        .iter()
        .chain(learner.omega().prefixed(OMEGA).iter())
        .chain(learner.key_net().params().prefixed(KEY).iter())
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    if let Some(net) = learner.value_net() {
        for (k, v) in net.params().prefixed(VALUE).iter() {
            tensors.insert(k, v.clone()).expect("distinct prefixes");
        }
    }
    Checkpoint { tensors, metadata }
}

/// Rebuilds a learner; fails when the stored shapes disagree with `cfg`.
pub fn learner_from_checkpoint(
    ckpt: &Checkpoint,
    cfg: MetaConfig,
    input_dim: usize,
    target: TargetSpec,
    step: usize,
) -> Result<Learner, CheckpointError> {
    let key_net = key_net_from(&ckpt.tensors.strip_prefix(KEY))?;
    let value = ckpt.tensors.strip_prefix(VALUE);
    let value_net = if value.is_empty() {
        None
    } else {
        Some(key_net_from(&value)?)
    };
    Ok(Learner::from_parts(
        cfg,
        target,
        input_dim,
        key_net,
        value_net,
        ckpt.tensors.strip_prefix(THETA),
        ckpt.tensors.strip_prefix(OMEGA),
        step,
    )?)
}
