//! Checkpoint file format.
//!
//! ```text
//! b"FPFCKPT1" | u64 LE header length | JSON header | buffers
//! ```
//!
//! The header lists the tensors (name, group, shape) in layout order and the
//! names of the buffers that follow. Each buffer holds every tensor back to
//! back as little-endian `f32`. The first buffer is always `params`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{NetworkParams, Slot};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FPFCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
    pub buffers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub header: CheckpointHeader,
    pub buffers: Vec<Vec<f32>>,
}

impl CheckpointData {
    pub fn buffer(&self, name: &str) -> Option<&[f32]> {
        self.header
            .buffers
            .iter()
            .position(|b| b == name)
            .map(|i| self.buffers[i].as_slice())
    }

    /// Rebuilds the `params` buffer against a network layout.
    pub fn params(&self, slots: &[Slot]) -> Result<NetworkParams<f32>> {
        let stored: Vec<(&str, &[usize])> = self
            .header
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect();
        let expected: Vec<(&str, &[usize])> = slots.iter().map(|s| (s.name.as_str(), s.shape.as_slice())).collect();
        if stored != expected {
            return Err(Error::Checkpoint("tensor layout does not match the model config".into()));
        }
        let data = self
            .buffer("params")
            .ok_or_else(|| Error::Checkpoint("missing params buffer".into()))?;
        Ok(NetworkParams::from_parts(slots.to_vec(), data.to_vec()))
    }
}

pub fn tensor_entries(slots: &[Slot]) -> Vec<TensorEntry> {
    slots
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            group: s.group.clone(),
            shape: s.shape.clone(),
        })
        .collect()
}

/// Writes atomically (temp file + rename).
pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, buffers: &[&[f32]]) -> Result<()> {
    if header.buffers.len() != buffers.len() {
        return Err(Error::Checkpoint("buffer names and buffers differ in count".into()));
    }
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if let Some(b) = buffers.iter().find(|b| b.len() != expected) {
        return Err(Error::Checkpoint(format!(
            "buffer of length {} does not match layout length {expected}",
            b.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * expected * buffers.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for b in buffers {
        for v in b.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::util::write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let len: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let mut cursor = 16 + header_len;
    let mut buffers = Vec::with_capacity(header.buffers.len());
    for name in &header.buffers {
        let raw = bytes
            .get(cursor..cursor + 4 * len)
            .ok_or_else(|| Error::Checkpoint(format!("truncated buffer `{name}`")))?;
        buffers.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        cursor += 4 * len;
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after buffers".into()));
    }
    Ok(CheckpointData { header, buffers })
}

/// Copies every `trunk` tensor of `source` whose name and shape match into
/// `params`. Ensemble members match on the unprefixed tensor name.
/// Returns the number of tensors imported.
pub fn import_trunk(params: &mut NetworkParams<f32>, source: &CheckpointData) -> Result<usize> {
    let data = source
        .buffer("params")
        .ok_or_else(|| Error::Checkpoint("missing params buffer".into()))?;
    let mut offset = 0;
    let mut sources = Vec::new();
    for t in &source.header.tensors {
        let len: usize = t.shape.iter().product();
        if t.group.ends_with("trunk") {
            let bare = t.name.rsplit_once("trunk/").map(|(_, n)| n.to_string()).unwrap_or_default();
            sources.push((bare, t.shape.clone(), offset, len));
        }
        offset += len;
    }
    let mut imported = 0;
    let slots = params.slots().to_vec();
    for (i, slot) in slots.iter().enumerate() {
        if !slot.group.ends_with("trunk") {
            continue;
        }
        let bare = slot.name.rsplit_once("trunk/").map(|(_, n)| n).unwrap_or_default();
        if let Some((_, shape, off, len)) = sources.iter().find(|(n, _, _, _)| n == bare) {
            if *shape != slot.shape {
                return Err(Error::Checkpoint(format!(
                    "trunk tensor {} has shape {shape:?}, expected {:?}",
                    slot.name, slot.shape
                )));
            }
            params.tensor_mut(i).copy_from_slice(&data[*off..off + len]);
            imported += 1;
        }
    }
    Ok(imported)
}
