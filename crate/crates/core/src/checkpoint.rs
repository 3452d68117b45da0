//! Checkpoint container: magic, format version, a JSON header describing the
//! topology, then every tensor and step size as little-endian IEEE-754 f64.
//!
//! ```text
//! b"SQATCKPT" | u32 version | u64 header_len | header JSON | f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, Model, QuantSettings};
use crate::train::TrainMode;

pub const MAGIC: &[u8; 8] = b"SQATCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run_id: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub step: usize,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    run_id: String,
    mode: TrainMode,
    seed: u64,
    step: usize,
    arch: Arch,
    settings: QuantSettings,
    tensors: Vec<TensorEntry>,
    step_sizes_offset: usize,
    step_sizes_len: usize,
    payload_len: usize,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload: Vec<f64> = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.model.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(t.data());
    }
    let steps = ckpt.model.step_sizes();
    let step_sizes_offset = payload.len();
    payload.extend_from_slice(&steps);
    let header = Header {
        run_id: ckpt.run_id.clone(),
        mode: ckpt.mode,
        seed: ckpt.seed,
        step: ckpt.step,
        arch: ckpt.model.arch().clone(),
        settings: ckpt.model.settings().clone(),
        tensors,
        step_sizes_offset,
        step_sizes_len: steps.len(),
        payload_len: payload.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let raw = &body[header_len..];
    if raw.len() != 8 * header.payload_len {
        return Err(corrupt(format!(
            "payload holds {} bytes, header declares {} values",
            raw.len(),
            header.payload_len
        )));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut model = Model::build(&header.arch, header.settings.clone(), header.mode, header.seed)
        .map_err(|e| corrupt(format!("topology: {e}")))?;
    let slots = model.named_tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "{} tensors stored, topology has {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
        if name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match topology slot {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let n = slot.numel();
        let src = payload
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| corrupt(format!("tensor {} out of bounds", entry.name)))?;
        slot.data_mut().copy_from_slice(src);
    }
    let steps = payload
        .get(header.step_sizes_offset..header.step_sizes_offset + header.step_sizes_len)
        .ok_or_else(|| corrupt("step sizes out of bounds"))?;
    let slots = model.step_sizes_mut();
    if slots.len() != steps.len() {
        return Err(corrupt("step-size count does not match topology"));
    }
    for (slot, &v) in slots.into_iter().zip(steps) {
        *slot = v;
    }
    Ok(Checkpoint {
        run_id: header.run_id,
        mode: header.mode,
        seed: header.seed,
        step: header.step,
        model,
    })
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
