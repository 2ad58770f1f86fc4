//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "IVQACKPT"  u32 version  u32 len  <len bytes of JSON metadata>
//! u32 count, then per tensor:
//!     u16 name_len  <name>  u8 ndim  ndim × u32 dims  product(dims) × f32
//! ```
//!
//! Parameter tensors are named `group.field`. Adam moments, when present,
//! follow as `adam.m:group.field` and `adam.v:group.field`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IVQACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m:";
const ADAM_V: &str = "adam.v:";

/// The JSON block of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Seed every random stream of the run was derived from.
    pub seed: u64,
    /// Vocabulary tokens in id order.
    pub vocab: Vec<String>,
    /// Pretrained embedding file used for semantic features, if any.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub adam_step: Option<u64>,
    #[serde(default)]
    pub epochs_completed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<Tensor<f32>>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new<F: Real>(meta: CheckpointMeta, model: &Model<F>, adam: Option<&AdamState<F>>) -> Self {
        let adam = adam.map(|a| AdamState {
            step: a.step,
            m: a.m.iter().map(Tensor::cast).collect(),
            v: a.v.iter().map(Tensor::cast).collect(),
        });
        Self {
            meta: CheckpointMeta {
                model: model.config.clone(),
                adam_step: adam.as_ref().map(|a| a.step),
                ..meta
            },
            params: model.params.map(|_, t| t.cast()),
            adam,
        }
    }

    pub fn model<F: Real>(&self) -> Result<Model<F>> {
        Model::new(self.meta.model.clone(), self.params.map(|_, t| t.cast().trainable()))
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Config(e.to_string()))?;
    let entries = ckpt.params.entries();
    let mut tensors: Vec<(String, &Tensor<f32>)> = entries.iter().map(|(n, t)| (n.to_string(), *t)).collect();
    if let Some(adam) = &ckpt.adam {
        for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
            for ((n, _), t) in entries.iter().zip(moments) {
                tensors.push((format!("{prefix}{n}"), t));
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    meta.model.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Tensors("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| CheckpointError::Tensors(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Tensors(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }

    let shapes = ModelParams::shapes(&meta.model);
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Tensors(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(CheckpointError::Tensors(format!(
                "{name} has shape {:?} but the config implies {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    };
    let params = shapes.try_map(|n, s| take(n.to_string(), s).map(Tensor::trainable))?;
    let adam = match meta.adam_step {
        None => None,
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (n, s) in shapes.entries() {
                m.push(take(format!("{ADAM_M}{n}"), s)?);
                v.push(take(format!("{ADAM_V}{n}"), s)?);
            }
            Some(AdamState { step, m, v })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Tensors(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { meta, params, adam })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
