//! On-disk container shared by datasets, checkpoints and field outputs:
//! a JSON manifest describing named float64 arrays plus one raw
//! little-endian binary blob per array.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::RteError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub endianness: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub arrays: BTreeMap<String, ArrayMeta>,
    /// Free-form metadata: generator config echo, seeds, counters.
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// A set of named float64 arrays staged for writing or loaded from disk.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub kind: String,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), ..Default::default() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.to_string(), (shape, data));
    }

    pub fn meta_str(&mut self, key: &str, value: &str) {
        self.meta.insert(key.to_string(), serde_json::Value::String(value.to_string()));
    }

    pub fn meta_json(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64]), RteError> {
        self.arrays
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| RteError::Container(format!("missing array '{name}'")))
    }

    pub fn get_meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }

    pub fn get_meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.as_f64())
    }

    pub fn get_meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(|v| v.as_u64())
    }

    /// Writes the manifest and one `<name>.bin` blob per array into `dir`
    /// (created if needed). Existing files with the same names are replaced.
    pub fn write(&self, dir: &Path) -> Result<(), RteError> {
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest {
            kind: self.kind.clone(),
            arrays: BTreeMap::new(),
            meta: self.meta.clone(),
        };
        for (name, (shape, data)) in &self.arrays {
            let bytes = f64s_to_le_bytes(data);
            let digest = hex::encode(Sha256::digest(&bytes));
            fs::write(dir.join(blob_file(name)), &bytes)?;
            manifest.arrays.insert(
                name.clone(),
                ArrayMeta {
                    shape: shape.clone(),
                    dtype: "float64".into(),
                    endianness: "little".into(),
                    sha256: digest,
                },
            );
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| RteError::Container(e.to_string()))?;
        fs::write(dir.join(MANIFEST_NAME), json)?;
        Ok(())
    }

    /// Reads a container back; blob sizes and checksums are verified against
    /// the manifest.
    pub fn read(dir: &Path) -> Result<Self, RteError> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let json = fs::read_to_string(&manifest_path).map_err(|e| {
            RteError::Container(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest =
            serde_json::from_str(&json).map_err(|e| RteError::Container(e.to_string()))?;
        let mut out = Container::new(&manifest.kind);
        out.meta = manifest.meta.clone();
        for (name, meta) in &manifest.arrays {
            if meta.dtype != "float64" || meta.endianness != "little" {
                return Err(RteError::Container(format!(
                    "array '{name}' has unsupported dtype/endianness"
                )));
            }
            let bytes = fs::read(dir.join(blob_file(name)))?;
            let expected = meta.shape.iter().product::<usize>() * 8;
            if bytes.len() != expected {
                return Err(RteError::Container(format!(
                    "array '{name}': blob has {} bytes, manifest shape {:?} needs {expected}",
                    bytes.len(),
                    meta.shape
                )));
            }
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != meta.sha256 {
                return Err(RteError::Container(format!("array '{name}': checksum mismatch")));
            }
            out.arrays.insert(name.clone(), (meta.shape.clone(), le_bytes_to_f64s(&bytes)));
        }
        Ok(out)
    }
}

fn blob_file(name: &str) -> PathBuf {
    // Array names may be hierarchical; blobs live flat in the directory.
    PathBuf::from(format!("{}.bin", name.replace('/', "__")))
}

pub fn f64s_to_le_bytes(data: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn le_bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::new("test");
        c.insert("a", vec![2, 3], vec![1.0, -2.5, 3.0e300, f64::MIN_POSITIVE, 0.0, -0.0]);
        c.insert("b", vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        c.meta_str("seed", "42");
        c.write(dir.path()).unwrap();
        let back = Container::read(dir.path()).unwrap();
        for name in ["a", "b"] {
            let (s0, d0) = c.get(name).unwrap();
            let (s1, d1) = back.get(name).unwrap();
            assert_eq!(s0, s1);
            assert_eq!(
                d0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                d1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(back.get_meta_str("seed"), Some("42"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::new("test");
        c.insert("a", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        c.write(dir.path()).unwrap();
        let blob = dir.path().join("a.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..16]).unwrap();
        assert!(Container::read(dir.path()).is_err());
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::new("test");
        c.insert("a", vec![2], vec![1.0, 2.0]);
        c.write(dir.path()).unwrap();
        let blob = dir.path().join("a.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[3] ^= 0xff;
        fs::write(&blob, &bytes).unwrap();
        let err = Container::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }
}
