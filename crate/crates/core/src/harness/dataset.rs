//! On-disk dataset: a JSON manifest plus raw little-endian float32 arrays
//! with SHA-256 checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DimoError, Result};

pub const DATASET_FORMAT: &str = "dimo-dataset-v1";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub shape: Vec<usize>,
    /// Complex arrays interleave real and imaginary parts.
    pub complex: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub mode: String,
    /// Free-form description of how the data were produced.
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

/// Handle on a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetContainer {
    dir: PathBuf,
    manifest: Manifest,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

impl DatasetContainer {
    /// Starts an empty dataset in `dir`, replacing any previous manifest.
    pub fn create(dir: &Path, mode: &str, metadata: serde_json::Value) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest { format: DATASET_FORMAT.into(), mode: mode.into(), metadata, arrays: BTreeMap::new() };
        let out = Self { dir: dir.to_path_buf(), manifest };
        out.flush()?;
        Ok(out)
    }

    /// Opens `dir` and verifies every array checksum.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| DimoError::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| DimoError::Data(format!("bad manifest {}: {e}", path.display())))?;
        if manifest.format != DATASET_FORMAT {
            return Err(DimoError::Data(format!("unsupported dataset format {}", manifest.format)));
        }
        let out = Self { dir: dir.to_path_buf(), manifest };
        for (name, entry) in &out.manifest.arrays {
            let bytes = out.read_bytes(entry)?;
            if digest(&bytes) != entry.sha256 {
                return Err(DimoError::Data(format!("checksum mismatch for array {name}")));
            }
        }
        Ok(out)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn mode(&self) -> &str {
        &self.manifest.mode
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.manifest.metadata
    }

    pub fn set_metadata(&mut self, key: &str, value: serde_json::Value) -> Result<()> {
        match &mut self.manifest.metadata {
            serde_json::Value::Object(map) => {
                map.insert(key.into(), value);
            }
            other => {
                let mut map = serde_json::Map::new();
                map.insert(key.into(), value);
                *other = serde_json::Value::Object(map);
            }
        }
        self.flush()
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.arrays.contains_key(name)
    }

    fn flush(&self) -> Result<()> {
        fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    fn write_bytes(&mut self, name: &str, shape: &[usize], complex: bool, bytes: Vec<u8>) -> Result<()> {
        let file = format!("{name}.f32");
        fs::write(self.dir.join(&file), &bytes)?;
        let entry = ArrayEntry { file, shape: shape.to_vec(), complex, sha256: digest(&bytes) };
        self.manifest.arrays.insert(name.into(), entry);
        self.flush()
    }

    fn read_bytes(&self, entry: &ArrayEntry) -> Result<Vec<u8>> {
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| DimoError::Data(format!("cannot read {}: {e}", path.display())))?;
        let count: usize = entry.shape.iter().product::<usize>() * if entry.complex { 2 } else { 1 };
        if bytes.len() != 4 * count {
            return Err(DimoError::Data(format!("{} holds {} bytes, expected {}", entry.file, bytes.len(), 4 * count)));
        }
        Ok(bytes)
    }

    fn entry(&self, name: &str, complex: bool) -> Result<&ArrayEntry> {
        let entry =
            self.manifest.arrays.get(name).ok_or_else(|| DimoError::Data(format!("dataset has no array {name}")))?;
        if entry.complex != complex {
            return Err(DimoError::Data(format!("array {name} has the wrong element type")));
        }
        Ok(entry)
    }

    pub fn write_real(&mut self, name: &str, array: &ArrayD<f64>) -> Result<()> {
        self.write_bytes(name, array.shape(), false, f32_bytes(array.iter().copied()))
    }

    pub fn write_complex(&mut self, name: &str, array: &ArrayD<Complex64>) -> Result<()> {
        self.write_bytes(name, array.shape(), true, f32_bytes(array.iter().flat_map(|v| [v.re, v.im])))
    }

    fn floats(&self, entry: &ArrayEntry) -> Result<Vec<f64>> {
        Ok(self
            .read_bytes(entry)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn read_real(&self, name: &str) -> Result<ArrayD<f64>> {
        let entry = self.entry(name, false)?;
        ArrayD::from_shape_vec(IxDyn(&entry.shape), self.floats(entry)?).map_err(|e| DimoError::Data(e.to_string()))
    }

    pub fn read_complex(&self, name: &str) -> Result<ArrayD<Complex64>> {
        let entry = self.entry(name, true)?;
        let values: Vec<Complex64> = self.floats(entry)?.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| DimoError::Data(e.to_string()))
    }
}
