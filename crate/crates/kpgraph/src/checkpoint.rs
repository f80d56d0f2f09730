//! Flat binary checkpoints.
//!
//! Layout: the 8-byte magic `KPGRAPH\0`, a `u32` format version, then one
//! record per tensor until end of file. A record is a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank` `u32` extents and the raw `f32` data.
//! Every integer and float is little-endian.

use std::path::Path;

use kpgraph_core::model::ModelParams;
use kpgraph_core::nn::{load_named, Parameters};
use kpgraph_core::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"KPGRAPH\0";
pub const VERSION: u32 = 1;

/// Non-tensor flag stored as a one-element record.
const SCALED_ATTENTION: &str = "meta.scaled_attention";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a kpgraph checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid record {0}: {1}")]
    Record(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] kpgraph_core::Error),
}

pub fn encode(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Record(format!("at byte {}", r.pos), "name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| CheckpointError::Record(name.clone(), "extent overflow".into()))?;
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Record(name.clone(), e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Learnable tensors, then batch-norm buffers, then metadata.
pub fn model_records(model: &ModelParams<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    model.visit("", &mut |n, t| out.push((n, t.clone())));
    model.visit_buffers("", &mut |n, t| out.push((n, t.clone())));
    let flag = if model.gnn.scaled_attention { 1.0 } else { 0.0 };
    out.push((SCALED_ATTENTION.to_string(), Tensor::new(&[1], vec![flag]).expect("one element")));
    out
}

pub fn model_from_records(records: &[(String, Tensor<f32>)]) -> Result<ModelParams<f32>, CheckpointError> {
    let last = records
        .iter()
        .find(|(n, _)| n == "cnn.layer7.weight")
        .ok_or_else(|| CheckpointError::Record("cnn.layer7.weight".into(), "missing".into()))?;
    let k = *last.1.shape().get(2).ok_or_else(|| CheckpointError::Record(last.0.clone(), "rank below 3".into()))?;
    let mut model = ModelParams::init(k * 16, 0)?;
    load_named(&mut model, records)?;
    if let Some((_, t)) = records.iter().find(|(n, _)| n == SCALED_ATTENTION) {
        model.gnn.scaled_attention = t.data().first().is_some_and(|&v| v != 0.0);
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &ModelParams<f32>) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(&model_records(model)))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams<f32>, CheckpointError> {
    model_from_records(&decode(&std::fs::read(path)?)?)
}
