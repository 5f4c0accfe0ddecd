//! Checkpoint format: a JSON manifest plus one flat little-endian float64
//! blob holding every tensor, guarded by a SHA-256 content checksum.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;

const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, counted in f64 values.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    /// Free-form architecture description owned by the caller.
    header: serde_json::Value,
    checksum: String,
    tensors: Vec<TensorEntry>,
}

fn blob_checksum(blob: &[u8]) -> String {
    let digest = Sha256::digest(blob);
    let mut hex = String::with_capacity(7 + digest.len() * 2);
    hex.push_str("sha256:");
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Writes `store` under `dir` (created if missing) with `header` recorded in
/// the manifest. Optimizer state is not persisted.
pub fn save(dir: &Path, store: &ParamStore, header: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::with_capacity(store.value_count() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        for v in &p.value {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: p.rows,
            cols: p.cols,
            offset,
            len: p.value.len(),
        });
        offset += p.value.len();
    }
    let manifest = Manifest {
        format_version: 1,
        header: header.clone(),
        checksum: blob_checksum(&blob),
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint, verifying the checksum before reconstructing tensors.
pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != 1 {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let checksum = blob_checksum(&blob);
    if checksum != manifest.checksum {
        return Err(Error::invariant(format!(
            "checkpoint blob checksum mismatch: manifest {} vs blob {checksum}",
            manifest.checksum
        )));
    }
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let start = t.offset * 8;
        let end = start + t.len * 8;
        if end > blob.len() {
            return Err(Error::invariant(format!(
                "tensor {} extends past the blob",
                t.name
            )));
        }
        let values: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store.insert(&t.name, t.rows, t.cols, values)?;
    }
    Ok((store, manifest.header))
}
