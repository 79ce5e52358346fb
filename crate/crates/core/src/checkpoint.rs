//! Checkpoint format: a JSON manifest plus a sidecar of little-endian `f32`
//! values concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Scalar, Tensor};

pub const FORMAT: &str = "vitprune-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the sidecar.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Sidecar file name, relative to the manifest.
    pub binary: String,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// All tensors of a checkpoint, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            params: ParamSet::new(),
            meta,
        }
    }

    /// Adds every tensor of `set` under `prefix.`.
    pub fn insert<F: Scalar>(&mut self, prefix: &str, set: &ParamSet<F>) {
        for (name, t) in set.iter() {
            let t32 = Tensor::<f32>::new(&t.shape, t.values.iter().map(|v| v.f64() as f32).collect())
                .expect("consistent tensor");
            self.params.push(format!("{prefix}.{name}"), t32);
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.params.names().iter().any(|n| n.starts_with(&p))
    }

    /// Loads the `prefix.*` tensors into `target`, matching by name and shape.
    pub fn restore<F: Scalar>(&self, prefix: &str, target: &mut ParamSet<F>) -> Result<()> {
        let p = format!("{prefix}.");
        let mut sub = ParamSet::<F>::new();
        for (name, t) in self.params.iter() {
            if let Some(rest) = name.strip_prefix(&p) {
                sub.push(rest.to_string(), t.cast());
            }
        }
        target.load_from(&sub)
    }

    /// Writes `<path>` (manifest) and the sidecar next to it with extension `.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bin_path = sidecar(path);
        let mut bytes = Vec::with_capacity(self.params.num_values() * 4);
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset: bytes.len(),
            });
            for v in &t.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: 1,
            binary: bin_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            params: entries,
            meta: self.meta.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!(
                "unknown checkpoint format {:?}",
                manifest.format
            )));
        }
        let bin_path = path.with_file_name(&manifest.binary);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut params = ParamSet::new();
        let mut expected_offset = 0;
        for entry in &manifest.params {
            if entry.dtype != "f32" {
                return Err(Error::Format(format!(
                    "{}: unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Format(format!(
                    "{}: offset {} breaks manifest order (expected {expected_offset})",
                    entry.name, entry.offset
                )));
            }
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * n;
            if end > bytes.len() {
                return Err(Error::Format(format!(
                    "{}: needs bytes {}..{end}, sidecar has {}",
                    entry.name,
                    entry.offset,
                    bytes.len()
                )));
            }
            let values = bytes[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(entry.name.clone(), Tensor::new(&entry.shape, values)?);
            expected_offset = end;
        }
        if expected_offset != bytes.len() {
            return Err(Error::Format(format!(
                "sidecar has {} bytes, manifest covers {expected_offset}",
                bytes.len()
            )));
        }
        Ok(Self {
            params,
            meta: manifest.meta,
        })
    }
}

/// Sidecar path for a manifest path.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// SHA-256 over names, shapes and exact value bits of a parameter set.
pub fn param_hash<F: Scalar>(set: &ParamSet<F>) -> String {
    let mut h = Sha256::new();
    for (name, t) in set.iter() {
        h.update(name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.values {
            h.update(v.f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
