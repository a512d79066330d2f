//! Parameter checkpoints: `manifest.json` names every tensor with its shape
//! and byte offset into `params.bin`, which holds little-endian f64 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::serial::to_json_pretty;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata supplied by the caller (model configuration and
    /// the like).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.num_values() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
        });
        for v in &p.value.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        blob: BLOB_FILE.into(),
        tensors,
        extra,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = to_json_pretty(&manifest).expect("manifest serialises");
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Loads values into `store`, which must already hold parameters with the
/// same names and shapes. Returns the manifest's `extra` field.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let bad = |msg: String| Error::Parse {
        path: dir.join(MANIFEST_FILE),
        line: 0,
        msg,
    };
    if manifest.tensors.len() != store.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for (entry, param) in manifest.tensors.iter().zip(store.params_mut()) {
        if entry.name != param.name || entry.shape != param.value.shape || entry.dtype != "f64" {
            return Err(bad(format!(
                "tensor {} {:?} ({}) does not match model tensor {} {:?}",
                entry.name, entry.shape, entry.dtype, param.name, param.value.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + param.value.len() * 8;
        if end > blob.len() {
            return Err(bad(format!("tensor {} runs past the end of the blob", entry.name)));
        }
        for (v, chunk) in param.value.data.iter_mut().zip(blob[start..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(manifest.extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("a.w", &[3, 4], Init::Scaled { fan_in: 4, gain: 1.0 }, &mut rng);
        store.add("a.b", &[3], Init::Constant(0.1), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store, serde_json::json!({"note": "x"})).unwrap();
        let mut other = store.clone();
        other.params_mut()[0].value.fill(0.0);
        let extra = load_checkpoint(dir.path(), &mut other).unwrap();
        assert_eq!(other, store);
        assert_eq!(extra["note"], "x");
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.tensors[1].offset, 96);
        assert_eq!(m.tensors[0].dtype, "f64");
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("a", &[2], Init::Zeros, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new();
        other.add("a", &[3], Init::Zeros, &mut rng);
        assert!(load_checkpoint(dir.path(), &mut other).is_err());
    }
}
