//! Binary tensor container.
//!
//! One format serves the sub-aperture stacks, flow fields and network
//! checkpoints: a magic header, a JSON metadata blob, then named tensors with
//! a shape header and little-endian payload (f32 for bulk imagery, f64 for
//! checkpoints).
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   : 6 bytes  b"CSTC1\0"
//! meta_len: u32      followed by `meta_len` bytes of JSON
//! count   : u32      number of tensors
//! tensor  : name_len u16, name bytes,
//!           dtype u8 (0 = f32, 1 = f64),
//!           ndim u8, dims ndim x u32,
//!           data prod(dims) x 4 or 8 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"CSTC1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Dataset(format!("container is missing tensor '{name}'")))
    }
}

pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(&str, &Tensor, DType)],
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor, dtype) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[match dtype {
            DType::F32 => 0u8,
            DType::F64 => 1u8,
        }])?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match dtype {
            DType::F32 => {
                for v in tensor.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for v in tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Dataset(format!(
            "{} is not a tensor container (bad magic)",
            path.display()
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Dataset("non-utf8 tensor name".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype[0] {
            0 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            1 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            d => return Err(Error::Dataset(format!("unknown dtype code {d}"))),
        };
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(Container { meta, tensors })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Save every store entry (parameters and buffers) at full precision.
pub fn save_checkpoint(path: &Path, store: &ParamStore, config_digest: &str) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "config_digest": config_digest,
    });
    let tensors: Vec<(&str, &Tensor, DType)> = store
        .iter()
        .map(|(n, t, _)| (n, t, DType::F64))
        .collect();
    write_container(path, &meta, &tensors)
}

/// Restore values into an already-constructed store. The stored config digest
/// must match `expected_digest`; tensor names and shapes must line up with
/// the store layout.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore, expected_digest: &str) -> Result<()> {
    let container = read_container(path)?;
    let kind = container.meta.get("kind").and_then(|v| v.as_str());
    if kind != Some("checkpoint") {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint container",
            path.display()
        )));
    }
    let stored = container
        .meta
        .get("config_digest")
        .and_then(|v| v.as_str())
        .unwrap_or("");
    if stored != expected_digest {
        return Err(Error::DigestMismatch {
            stored: stored.to_string(),
            expected: expected_digest.to_string(),
        });
    }
    for (name, tensor) in &container.tensors {
        if !store.contains(name) {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor '{name}' not present in model"
            )));
        }
        if store.get(name).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                tensor.shape(),
                store.get(name).shape()
            )));
        }
    }
    let expected: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in &expected {
        let t = container
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing model tensor '{name}'"))
            })?;
        *store.get_mut(name) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let a = Tensor::from_vec(&[2, 3], vec![1.5, -2.0, 0.25, 3.0, 4.0, -0.125]);
        let b = Tensor::from_vec(&[4], vec![0.0, 1.0, 2.0, 3.0]);
        let meta = serde_json::json!({"kind": "test"});
        write_container(
            &path,
            &meta,
            &[("a", &a, DType::F32), ("b", &b, DType::F64)],
        )
        .unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(c.meta["kind"], "test");
        assert_eq!(c.tensor("a").unwrap(), &a); // values chosen to be f32-exact
        assert_eq!(c.tensor("b").unwrap(), &b);
    }

    #[test]
    fn checkpoint_digest_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        save_checkpoint(&path, &store, "digest-a").unwrap();
        let err = load_checkpoint(&path, &mut store, "digest-b").unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { .. }));
        load_checkpoint(&path, &mut store, "digest-a").unwrap();
    }
}
