//! Checkpoints are a directory holding `params.bin`, a flat little-endian
//! f64 blob in name order, and `manifest.json` mapping each tensor to its
//! offset and shape alongside caller-supplied metadata. Saving the same
//! parameters twice produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, ParamSet};

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    /// Element offset into the blob, not bytes.
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: BTreeMap<String, TensorEntry>,
    extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, params: &ParamSet, extra: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = BTreeMap::new();
    let mut offset = 0usize;
    for (name, m) in params.iter() {
        tensors.insert(
            name.clone(),
            TensorEntry {
                offset,
                rows: m.rows(),
                cols: m.cols(),
            },
        );
        for v in m.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += m.data().len();
    }
    fs::write(dir.join("params.bin"), &blob)?;
    let manifest = Manifest {
        tensors,
        extra: extra.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let blob = fs::read(dir.join("params.bin"))?;
    if blob.len() % 8 != 0 {
        return Err(Error::data(format!(
            "parameter blob length {} is not a multiple of 8",
            blob.len()
        )));
    }
    let total = blob.len() / 8;
    let mut params = ParamSet::new();
    for (name, entry) in &manifest.tensors {
        let numel = entry.rows * entry.cols;
        let end = entry.offset.checked_add(numel).filter(|&e| e <= total);
        let Some(end) = end else {
            return Err(Error::data(format!(
                "tensor {name:?} runs past the end of the parameter blob"
            )));
        };
        let mut data = Vec::with_capacity(numel);
        for i in entry.offset..end {
            let bytes: [u8; 8] = blob[i * 8..i * 8 + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        params.insert(name, Matrix::from_vec(entry.rows, entry.cols, data));
    }
    let expected: usize = manifest.tensors.values().map(|e| e.rows * e.cols).sum();
    if expected != total {
        return Err(Error::data(format!(
            "parameter blob holds {total} values but the manifest describes {expected}"
        )));
    }
    Ok((params, manifest.extra))
}
