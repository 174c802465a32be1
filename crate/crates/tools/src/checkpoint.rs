//! Binary checkpoint format:
//!
//! ```text
//! "MOKA" | version: u32 LE | header_len: u64 LE | header JSON | f64 LE data
//! ```
//!
//! The header carries the model config and the parameter table (name, shape,
//! byte offset into the data section). Loading reproduces every parameter
//! bit-for-bit and validates the table against what the config expects.

use std::fs;
use std::path::Path;

use laneid_core::model::{parameter_spec, ModelConfig};
use laneid_core::optim::ParamSet;
use laneid_core::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"MOKA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(params: &ParamSet, config: &ModelConfig, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += (p.value.numel() * 8) as u64;
    }
    let header = Header { config: config.clone(), params: entries };
    let header_json = serde_json::to_vec(&header)
        .map_err(|source| Error::Json { path: path.to_path_buf(), source })?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + offset as usize);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in params.iter() {
        for &v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 {
        return Err(Error::TruncatedData { path: path.to_path_buf(), detail: "file shorter than fixed header".into() });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::TruncatedData {
            path: path.to_path_buf(),
            detail: format!("header wants {header_len} bytes, {} available", bytes.len() - 16),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    header.config.validate()?;

    // The table must match what the config defines, in order.
    let expected = parameter_spec(&header.config);
    if expected.len() != header.params.len() {
        return Err(Error::ParamMismatch {
            path: path.to_path_buf(),
            detail: format!("config expects {} parameters, file has {}", expected.len(), header.params.len()),
        });
    }
    for ((want_name, want_shape), entry) in expected.iter().zip(header.params.iter()) {
        if want_name != &entry.name || want_shape != &entry.shape {
            return Err(Error::ParamMismatch {
                path: path.to_path_buf(),
                detail: format!(
                    "expected {want_name:?} {want_shape:?}, file has {:?} {:?}",
                    entry.name, entry.shape
                ),
            });
        }
    }

    let data = &bytes[16 + header_len..];
    let mut params = ParamSet::new();
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > data.len() {
            return Err(Error::TruncatedData {
                path: path.to_path_buf(),
                detail: format!(
                    "parameter {:?} wants bytes {start}..{end}, data section has {}",
                    entry.name,
                    data.len()
                ),
            });
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(&entry.name, Tensor::new(&entry.shape, values)?)?;
    }
    Ok((header.config, params))
}
