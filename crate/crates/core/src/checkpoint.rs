//! Deterministic tensor-container serialization.
//!
//! Layout: an 8-byte little-endian manifest length, a JSON manifest, then
//! the raw payload. The manifest carries a file-level `version` ("1"), one
//! entry per tensor (name, dtype, shape, byte offset into the payload), and
//! arbitrary caller metadata. Payload tensors are row-major little-endian
//! 32-bit floats. Writing the same tensors and metadata twice produces
//! byte-identical files.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Dtype, Tensor};

pub const CONTAINER_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad container: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub version: String,
    pub entries: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Serializes named tensors and metadata into `w`.
pub fn write_container<W: Write>(
    w: &mut W,
    tensors: &[(String, &Tensor<f32>)],
    metadata: serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: Dtype::F32,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * 4) as u64;
    }
    let manifest = ContainerManifest { version: CONTAINER_VERSION.into(), entries, metadata };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in tensors {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a container written by [`write_container`].
pub fn read_container<R: Read>(
    r: &mut R,
) -> Result<(ContainerManifest, Vec<(String, Tensor<f32>)>), CheckpointError> {
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: ContainerManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != CONTAINER_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported container version {:?}",
            manifest.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.dtype != Dtype::F32 {
            return Err(CheckpointError::Format(format!(
                "tensor {} has dtype {}, expected f32",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(CheckpointError::Format(format!(
                "tensor {} extends past payload ({} > {})",
                e.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        tensors.push((e.name.clone(), t));
    }
    Ok((manifest, tensors))
}

pub fn write_container_file(
    path: &std::path::Path,
    tensors: &[(String, &Tensor<f32>)],
    metadata: serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut f, tensors, metadata)?;
    f.flush()?;
    Ok(())
}

pub fn read_container_file(
    path: &std::path::Path,
) -> Result<(ContainerManifest, Vec<(String, Tensor<f32>)>), CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_container(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_tensors_and_metadata() {
        let a = Tensor::<f32>::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.25]).unwrap();
        let b = Tensor::<f32>::scalar(42.0);
        let meta = serde_json::json!({"step": 7, "note": "x"});
        let mut buf = Vec::new();
        write_container(&mut buf, &[("a".into(), &a), ("b".into(), &b)], meta.clone()).unwrap();
        let (manifest, tensors) = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(manifest.version, "1");
        assert_eq!(manifest.metadata, meta);
        assert_eq!(tensors[0].1, a);
        assert_eq!(tensors[1].1, b);
        assert_eq!(manifest.entries[1].offset, 24);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let a = Tensor::<f32>::full(&[4], 0.125);
        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        write_container(&mut buf1, &[("w".into(), &a)], serde_json::json!({"k": 1})).unwrap();
        write_container(&mut buf2, &[("w".into(), &a)], serde_json::json!({"k": 1})).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = Tensor::<f32>::full(&[4], 1.0);
        let mut buf = Vec::new();
        write_container(&mut buf, &[("w".into(), &a)], serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_container(&mut buf.as_slice()).is_err());
    }
}
