//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "CMVECKPT"
//! header_len u64 LE
//! header     JSON (CheckpointHeader), header_len bytes
//! count      u64 LE   number of parameters
//! per parameter:
//!   name_len u32 LE, name UTF-8
//!   ndim     u32 LE, dims u64 LE × ndim
//!   data     f64 LE × product(dims)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, Task};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CMVECKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub name: String,
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub task: Task,
    pub template: Option<TemplateRecord>,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub dev_accuracy: Option<f64>,
}

pub fn encode(header: &CheckpointHeader, model: &Model) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(64 + json.len() + 8 * model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }
}

/// Parses a checkpoint into its header and named tensors.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let header_len = c.len()?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(header_len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = c.len()?;
    let mut params = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        params.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((header, params))
}

/// Rebuilds a model from a decoded checkpoint; every parameter of the
/// architecture described by the header must be present with its shape.
pub fn restore(header: &CheckpointHeader, params: Vec<(String, Tensor)>) -> Result<Model> {
    if header.encoder.vocab_size != header.vocab.len() {
        return Err(Error::Format(format!(
            "checkpoint vocab has {} tokens but encoder expects {}",
            header.vocab.len(),
            header.encoder.vocab_size
        )));
    }
    let mut model = Model::new(header.encoder, header.head, 0)?;
    if params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, architecture needs {}",
            params.len(),
            model.store.len()
        )));
    }
    for (name, t) in params {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {:?}, architecture needs {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(model)
}

pub fn save(path: &Path, header: &CheckpointHeader, model: &Model) -> Result<()> {
    fs::write(path, encode(header, model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, params) = decode(&bytes)?;
    let model = restore(&header, params)?;
    Ok((header, model))
}
