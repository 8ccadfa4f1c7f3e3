//! Named-tensor model archives.
//!
//! All trained parameter sets are persisted in one structured-text format:
//! a header line followed by one JSON record per tensor with its name, shape
//! and row-major values. Floats round-trip bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    producing_stage: String,
    config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

/// An ordered map of named tensors plus provenance metadata.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub producing_stage: String,
    pub config_hash: String,
    tensors: BTreeMap<String, Array2<f64>>,
}

impl TensorArchive {
    pub fn new(producing_stage: &str, config_hash: &str) -> Self {
        Self {
            producing_stage: producing_stage.to_string(),
            config_hash: config_hash.to_string(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Array2<f64>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        let header = Header {
            format_version: FORMAT_VERSION,
            producing_stage: self.producing_stage.clone(),
            config_hash: self.config_hash.clone(),
        };
        serde_json::to_writer(&mut buf, &header)?;
        buf.push(b'\n');
        for (name, tensor) in &self.tensors {
            let record = TensorRecord {
                name: name.clone(),
                shape: [tensor.nrows(), tensor.ncols()],
                values: tensor.iter().copied().collect(),
            };
            serde_json::to_writer(&mut buf, &record)?;
            buf.push(b'\n');
        }
        atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Archive(format!("{}: empty archive", path.display())))?;
        let header: Header = serde_json::from_str(header_line)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "{}: format version {} (expected {})",
                path.display(),
                header.format_version,
                FORMAT_VERSION
            )));
        }
        let mut tensors = BTreeMap::new();
        for line in lines {
            let record: TensorRecord = serde_json::from_str(line)?;
            let [rows, cols] = record.shape;
            if record.values.len() != rows * cols {
                return Err(Error::Archive(format!(
                    "tensor {}: {} values for shape {}x{}",
                    record.name,
                    record.values.len(),
                    rows,
                    cols
                )));
            }
            let tensor = Array2::from_shape_vec((rows, cols), record.values)
                .map_err(|e| Error::Archive(e.to_string()))?;
            tensors.insert(record.name, tensor);
        }
        Ok(Self {
            producing_stage: header.producing_stage,
            config_hash: header.config_hash,
            tensors,
        })
    }
}

/// Stable hex digest of a resolved configuration string.
pub fn config_hash(resolved: &str) -> String {
    let digest = Sha256::digest(resolved.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use rand::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut r = rng(9);
        let mut archive = TensorArchive::new("test", &config_hash("cfg"));
        for i in 0..4 {
            let t = Array2::from_shape_fn((3, 5), |_| r.gen_range(-1e3..1e3_f64));
            archive.insert(&format!("t{i}"), t);
        }
        archive.insert("tiny", Array2::from_elem((1, 1), f64::MIN_POSITIVE));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tensors.jsonl");
        archive.save(&path).unwrap();
        let back = TensorArchive::load(&path).unwrap();
        assert_eq!(back.producing_stage, "test");
        assert_eq!(back.config_hash, archive.config_hash);
        for name in archive.names() {
            assert_eq!(back.get(name).unwrap(), archive.get(name).unwrap());
        }

        // Saving the loaded archive reproduces the file byte for byte.
        let path2 = dir.path().join("m2.tensors.jsonl");
        back.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tensors.jsonl");
        std::fs::write(
            &path,
            "{\"format_version\":99,\"producing_stage\":\"x\",\"config_hash\":\"h\"}\n",
        )
        .unwrap();
        assert!(matches!(
            TensorArchive::load(&path),
            Err(Error::Archive(_))
        ));
    }
}
