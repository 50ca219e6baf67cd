//! Checkpoint container.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "BIQTCKPT"
//! 8       2           format version (u16 LE), currently 1
//! 10      4           metadata length M (u32 LE)
//! 14      M           metadata: UTF-8 JSON {"arch", "normalization", "manifest"}
//! 14+M    4           blob count B (u32 LE)
//!         B × blob:   name length (u16 LE), name (UTF-8),
//!                     rank (u8), dims (rank × u32 LE),
//!                     values (prod(dims) × f64 LE, row-major)
//! end−32  32          SHA-256 of every preceding byte
//! ```
//!
//! Blob names are those of [`ModelParams::tensors`], e.g. `mean.0.weight`,
//! `cov.2.log_var`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ArchConfig, ModelParams, Normalization};
use crate::error::{Error, Result};
use crate::hash;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BIQTCKPT";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    arch: ArchConfig,
    normalization: Normalization,
    manifest: Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub manifest: Value,
    /// Hex SHA-256 trailer of the file.
    pub checksum: String,
}

pub fn to_bytes(params: &ModelParams, manifest: &Value) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata {
        arch: params.arch,
        normalization: params.norm.clone(),
        manifest: manifest.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = hash::sha256(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 2 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if hash::sha256(body) != trailer {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut rd = Reader { buf: body, pos: 8 };
    let version = rd.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = rd.u32()? as usize;
    let meta: Metadata = serde_json::from_slice(rd.take(meta_len)?)?;
    let mut params = super::init_params(meta.arch, 0)?;
    params.norm = meta.normalization;
    let names = params.tensor_names();
    let count = rd.u32()? as usize;
    if count != names.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} blobs, variant {} needs {}",
            meta.arch.variant,
            names.len()
        )));
    }
    let slots = params.tensors_mut();
    for (expected, slot) in names.iter().zip(slots) {
        let name_len = rd.u16()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Format(format!("expected blob {expected}, found {name}")));
        }
        let rank = rd.u8()? as usize;
        let dims = (0..rank)
            .map(|_| rd.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != slot.shape() {
            return Err(Error::Format(format!(
                "blob {name} has shape {dims:?}, expected {:?}",
                slot.shape()
            )));
        }
        let n: usize = dims.iter().product();
        let raw = rd.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::new(dims, data)?;
    }
    if rd.pos != body.len() {
        return Err(Error::Format("trailing bytes after last blob".into()));
    }
    params.validate()?;
    Ok(Checkpoint {
        params,
        manifest: meta.manifest,
        checksum: hex(trailer),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a checkpoint and returns its hex checksum.
pub fn save(path: impl AsRef<Path>, params: &ModelParams, manifest: &Value) -> Result<String> {
    let bytes = to_bytes(params, manifest)?;
    fs::write(path, &bytes)?;
    Ok(hex(&bytes[bytes.len() - 32..]))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// Checksum identifying a parameter set independent of any manifest.
pub fn params_checksum(params: &ModelParams) -> String {
    let bytes = to_bytes(params, &Value::Null).expect("serializable");
    hex(&bytes[bytes.len() - 32..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Variant};

    #[test]
    fn round_trip_preserves_everything() {
        for v in [Variant::Baseline, Variant::HeteroVd2, Variant::HeteroVd1] {
            let mut p = init_params(ArchConfig::new(2, 3, v).unwrap(), 4).unwrap();
            p.norm.target_mean = vec![0.5, 1.0, 2.0];
            let manifest = serde_json::json!({"variant": v.as_str(), "epochs": 3});
            let bytes = to_bytes(&p, &manifest).unwrap();
            let ck = from_bytes(&bytes).unwrap();
            assert_eq!(ck.params, p);
            assert_eq!(ck.manifest, manifest);
            assert_eq!(ck.checksum.len(), 64);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let p = init_params(ArchConfig::new(1, 1, Variant::Baseline).unwrap(), 4).unwrap();
        let mut bytes = to_bytes(&p, &Value::Null).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        assert!(from_bytes(b"nonsense").is_err());
    }
}
