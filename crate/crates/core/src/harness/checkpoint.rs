//! Checkpoint archive:
//!
//! ```text
//! "VKCK"            4 bytes magic
//! u32 version       little-endian, currently 1
//! u64 header_len    little-endian
//! header            header_len bytes of UTF-8 JSON (see `CheckpointHeader`)
//! data              concatenated little-endian f32 arrays
//! ```
//!
//! Each header tensor entry gives its parameter path, shape and the byte
//! offset of its array within `data`. Arrays are row-major.

use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, ParamStore};
use crate::panoptic::ClassTable;
use crate::video::VideoKNet;

const MAGIC: &[u8; 4] = b"VKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub config: RunConfig,
    pub classes: ClassTable,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Builds an untrained model; parameters are drawn from `cfg.seed`.
pub fn build_model(cfg: &RunConfig, classes: &ClassTable, dtype: DType) -> Result<(ParamStore, VideoKNet)> {
    let mut store = ParamStore::new(dtype, cfg.seed);
    let model = VideoKNet::new(&mut store, &cfg.model, classes, cfg.features.clone())?;
    Ok((store, model))
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    cfg: &RunConfig,
    classes: &ClassTable,
    step: usize,
) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (name, var) in store.named() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            offset: data.len() as u64,
        });
        for v in to_f64_vec(var.as_tensor())? {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        classes: classes.clone(),
        step,
        tensors,
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + h.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&data);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn read_checkpoint_header(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = crate::error::read_input(path)?;
    if bytes.len() < 16 {
        return Err(parse_err(path, bytes.len(), "truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(parse_err(path, 0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        parse_err(
            path,
            bytes.len(),
            format!("header of {hlen} bytes runs past end of file"),
        )
    })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| parse_err(path, 16 + e.column(), format!("header json: {e}")))?;
    Ok((header, bytes[end..].to_vec()))
}

/// A restored model with its provenance.
pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
    pub model: VideoKNet,
}

pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<LoadedCheckpoint> {
    let (header, data) = read_checkpoint_header(path)?;
    if header.config.hash() != header.config_hash {
        return Err(Error::Data(format!(
            "{}: stored config hash {} does not match the stored config",
            path.display(),
            header.config_hash
        )));
    }
    let (store, model) = build_model(&header.config, &header.classes, dtype)?;
    if store.named().len() != header.tensors.len() {
        return Err(Error::Data(format!(
            "{}: {} tensors stored, model has {}",
            path.display(),
            header.tensors.len(),
            store.named().len()
        )));
    }
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * n;
        if end > data.len() {
            return Err(parse_err(
                path,
                data.len(),
                format!("tensor `{}` runs past end of data", t.name),
            ));
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.assign(&t.name, &t.shape, &values)?;
    }
    Ok(LoadedCheckpoint { header, store, model })
}
