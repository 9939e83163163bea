//! Checkpoint container: `FFT1` magic, little-endian `u64` header length,
//! JSON header, then raw little-endian tensor payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FFT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
    tracked: Vec<String>,
    first_moments: Vec<Entry>,
    second_moments: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
    rng: Option<Rng>,
    epoch: usize,
    meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct OptimizerSnapshot<T> {
    pub config: AdamWConfig,
    pub step: u64,
    /// Names of the tracked parameters, in optimizer order.
    pub tracked: Vec<String>,
    pub first_moments: Vec<Tensor<T>>,
    pub second_moments: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<OptimizerSnapshot<T>>,
    pub rng: Option<Rng>,
    pub epoch: usize,
    /// Free-form run metadata (history, notes).
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn of_model(model: &TransformerModel<T>) -> Self {
        Self {
            config: model.config.clone(),
            tensors: model
                .params
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
            optimizer: None,
            rng: None,
            epoch: 0,
            meta: serde_json::Value::Null,
        }
    }

    pub fn with_optimizer(mut self, model: &TransformerModel<T>, opt: &AdamW<T>) -> Self {
        let (m, v) = opt.moments();
        self.optimizer = Some(OptimizerSnapshot {
            config: opt.config,
            step: opt.step_count(),
            tracked: opt.tracked().iter().map(|&id| model.params.name(id).to_string()).collect(),
            first_moments: m.to_vec(),
            second_moments: v.to_vec(),
        });
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `model` from this checkpoint by name.
    /// Missing names and shape mismatches are incompatibilities.
    pub fn load_into(&self, model: &mut TransformerModel<T>) -> Result<()> {
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor {name}")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Incompatible(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, t.clone())?;
        }
        Ok(())
    }

    /// Builds the configured model and loads its parameters.
    pub fn to_model(&self) -> Result<TransformerModel<T>> {
        let mut model = TransformerModel::new(self.config.clone(), &mut crate::rng::seeded(0))?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Optimizer for `model` restored from the snapshot.
    pub fn to_optimizer(&self, model: &TransformerModel<T>) -> Result<Option<AdamW<T>>> {
        let Some(snap) = &self.optimizer else {
            return Ok(None);
        };
        let tracked = snap
            .tracked
            .iter()
            .map(|n| {
                model
                    .params
                    .id(n)
                    .ok_or_else(|| Error::Incompatible(format!("optimizer tracks unknown tensor {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut opt = AdamW::new(&model.params, tracked, snap.config);
        opt.restore(snap.step, snap.first_moments.clone(), snap.second_moments.clone())?;
        Ok(Some(opt))
    }
}

fn push_tensor<T: Scalar>(payload: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Entry {
    let offset = payload.len();
    for &v in t.data() {
        v.write_le(payload);
    }
    Entry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        offset,
    }
}

fn read_tensor<T: Scalar>(payload: &[u8], e: &Entry) -> Result<Tensor<T>> {
    let n: usize = e.shape.iter().product();
    let end = e.offset + n * T::BYTES;
    let bytes = payload.get(e.offset..end).ok_or_else(|| {
        Error::Format(format!(
            "payload ends at {} bytes but tensor {} needs bytes {}..{end}",
            payload.len(),
            e.name,
            e.offset
        ))
    })?;
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(e.shape.clone(), data)
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let tensors = ckpt
        .tensors
        .iter()
        .map(|(n, t)| push_tensor(&mut payload, n, t))
        .collect();
    let optimizer = ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
        config: o.config,
        step: o.step,
        tracked: o.tracked.clone(),
        first_moments: o
            .tracked
            .iter()
            .zip(&o.first_moments)
            .map(|(n, t)| push_tensor(&mut payload, n, t))
            .collect(),
        second_moments: o
            .tracked
            .iter()
            .zip(&o.second_moments)
            .map(|(n, t)| push_tensor(&mut payload, n, t))
            .collect(),
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        config: ckpt.config.clone(),
        tensors,
        optimizer,
        rng: ckpt.rng.clone(),
        epoch: ckpt.epoch,
        meta: ckpt.meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(12..12usize.saturating_add(len))
        .ok_or_else(|| Error::Format("checkpoint truncated inside its header".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("unreadable checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {} (this build reads {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} tensors, expected {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let payload = &bytes[12 + len..];
    let tensors = header
        .tensors
        .iter()
        .map(|e| Ok((e.name.clone(), read_tensor(payload, e)?)))
        .collect::<Result<Vec<_>>>()?;
    let optimizer = match header.optimizer {
        None => None,
        Some(o) => Some(OptimizerSnapshot {
            config: o.config,
            step: o.step,
            first_moments: o.first_moments.iter().map(|e| read_tensor(payload, e)).collect::<Result<_>>()?,
            second_moments: o.second_moments.iter().map(|e| read_tensor(payload, e)).collect::<Result<_>>()?,
            tracked: o.tracked,
        }),
    };
    Ok(Checkpoint {
        config: header.config,
        tensors,
        optimizer,
        rng: header.rng,
        epoch: header.epoch,
        meta: header.meta,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
