//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! header (config echo, tensor names, shapes, byte offsets), then every
//! tensor as little-endian `f64`s.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Forecaster, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "attnembed-checkpoint";

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Contract(format!("checkpoint: {}", reason.into()))
}

pub fn save_checkpoint(path: &Path, model: &Forecaster) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut payload = Vec::with_capacity(model.params().numel() * 8);
    for p in model.params().iter() {
        tensors.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        magic: CHECKPOINT_MAGIC.into(),
        version: 1,
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Forecaster> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(bad("file shorter than its length prefix"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if len > body.len() {
        return Err(bad(format!("header length {len} exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| bad(e.to_string()))?;
    if header.magic != CHECKPOINT_MAGIC || header.version != 1 {
        return Err(bad(format!("unsupported format {} v{}", header.magic, header.version)));
    }
    let payload = &body[len..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > payload.len() {
            return Err(bad(format!("tensor `{}` runs past the payload", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Forecaster::from_params(header.config, store)
}
