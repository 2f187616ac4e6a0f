//! Checkpoint container: a JSON manifest describing named f64 tensors
//! followed by their raw little-endian row-major payload.
//!
//! Layout: 8-byte magic, u64 LE manifest length, manifest JSON, payload.
//! The manifest records the full run configuration so a checkpoint is
//! self-describing; loading rejects any manifest/payload disagreement.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HBDRIVE1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload section.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

pub fn save(path: &Path, config: &RunConfig, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, arr) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
        });
        offset += (arr.len() * 8) as u64;
    }
    let manifest = Manifest {
        schema: crate::config::SCHEMA_VERSION,
        config: config.clone(),
        tensors: entries,
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(mjson.len() as u64).to_le_bytes())?;
    f.write_all(&mjson)?;
    for arr in tensors.values() {
        // standard layout guarantees row-major iteration order
        let flat = arr.as_standard_layout();
        let mut buf = Vec::with_capacity(flat.len() * 8);
        for &v in flat.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".to_string()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest length".to_string()))?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)
        .map_err(|_| Error::Checkpoint("truncated manifest".to_string()))?;
    let manifest: Manifest = serde_json::from_slice(&mjson)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.schema != crate::config::SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema {} unsupported",
            manifest.schema
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let mut tensors = BTreeMap::new();
    // tensors must be densely packed in manifest order
    let mut expected_end = 0u64;
    for entry in &manifest.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        if entry.offset != expected_end {
            return Err(Error::Checkpoint(format!(
                "tensor {}: offset {} does not follow previous tensor at {}",
                entry.name, entry.offset, expected_end
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: payload ends at {} but needs {}",
                entry.name,
                payload.len(),
                end
            )));
        }
        expected_end = end as u64;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[start + i * 8..start + (i + 1) * 8]);
            data.push(f64::from_le_bytes(b));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), arr).is_some() {
            return Err(Error::Checkpoint(format!(
                "duplicate tensor {}",
                entry.name
            )));
        }
    }
    if expected_end != payload.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "payload length {} does not match manifest extent {}",
            payload.len(),
            expected_end
        )));
    }
    Ok(Checkpoint {
        config: manifest.config,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn sample_tensors() -> BTreeMap<String, ArrayD<f64>> {
        let mut t = BTreeMap::new();
        t.insert(
            "a.w".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| (ix[0] * 4 + ix[1]) as f64 * 0.5),
        );
        t.insert(
            "b.emb".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[2, 2, 2]), |ix| {
                -1.5 + (ix[0] + 2 * ix[1] + 4 * ix[2]) as f64
            }),
        );
        t.insert("c.scalar".to_string(), ArrayD::zeros(IxDyn(&[1])));
        t
    }

    #[test]
    fn round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let cfg = RunConfig::default();
        let tensors = sample_tensors();
        save(&path, &cfg, &tensors).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.tensors.len(), tensors.len());
        for (name, arr) in &tensors {
            assert_eq!(&loaded.tensors[name], arr, "tensor {name}");
        }
        assert_eq!(loaded.config.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC????????").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        save(&path, &RunConfig::default(), &sample_tensors()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_manifest_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.bin");
        save(&path, &RunConfig::default(), &sample_tensors()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // enlarge a declared shape without touching the payload
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mjson = String::from_utf8(bytes[16..16 + mlen].to_vec()).unwrap();
        let patched = mjson.replacen("[3,4]", "[3,5]", 1);
        assert_ne!(mjson, patched);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + mlen..]);
        bytes = out;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
