//! Tensor container on disk: a directory holding `manifest.json` and a
//! single `tensors.bin` blob of little-endian `f32` values concatenated in
//! manifest order. Every tensor carries a SHA-256 of its bytes.
//!
//! Model checkpoints, relevance maps, priors and gates all use this format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn encode(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_container<'a, I>(dir: &Path, kind: &str, meta: serde_json::Value, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, m) in tensors {
        let bytes = encode(m);
        if bytes
            .chunks_exact(4)
            .any(|c| !f32::from_le_bytes([c[0], c[1], c[2], c[3]]).is_finite())
        {
            return Err(Error::numerical(
                format!("container `{kind}` tensor {name}"),
                "value not representable as finite f32",
            ));
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity {
            path: man_path,
            detail: format!("unsupported format version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

/// Reads and verifies a container. `kind` must match the manifest.
pub fn read_container(dir: &Path, kind: &str) -> Result<(Manifest, Vec<(String, Matrix)>)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::Integrity {
            path: dir.to_path_buf(),
            detail: format!("expected a `{kind}` container, found `{}`", manifest.kind),
        });
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &manifest.tensors {
        let [rows, cols] = entry.shape;
        let integrity = |detail: String| Error::Integrity {
            path: blob_path.clone(),
            detail,
        };
        if entry.length != (rows * cols * 4) as u64 || entry.offset != expected_offset {
            return Err(integrity(format!(
                "tensor {} has inconsistent shape/offset/length",
                entry.name
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| integrity(format!("blob truncated at tensor {}", entry.name)))?;
        let digest = hex::encode(Sha256::digest(bytes));
        if digest != entry.sha256 {
            return Err(integrity(format!("checksum mismatch for tensor {}", entry.name)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        out.push((entry.name.clone(), Matrix::new(rows, cols, data)?));
        expected_offset = end as u64;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Integrity {
            path: blob_path,
            detail: "trailing bytes after last tensor".into(),
        });
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        let a = Matrix::from_rows(&[&[1.0, 2.5], &[-3.0, 0.125]]);
        let b = Matrix::row_vector(vec![7.0]);
        write_container(&path, "test", serde_json::json!({"x": 1}), [("a", &a), ("b", &b)]).unwrap();
        let (man, ts) = read_container(&path, "test").unwrap();
        assert_eq!(man.meta["x"], 1);
        assert_eq!(ts[0], ("a".to_string(), a));
        assert_eq!(ts[1].1, b);
        assert!(read_container(&path, "other").is_err());

        let blob = path.join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x01;
        fs::write(&blob, bytes).unwrap();
        let err = read_container(&path, "test").unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }), "{err}");
    }
}
