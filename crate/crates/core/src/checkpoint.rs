//! Binary containers: 8-byte magic, `u32` version, `u64` manifest length,
//! JSON manifest, then little-endian `f64` payload. Checkpoints and bank
//! stores share this layout with different magics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use mrgr_numerics::Tensor;

use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRGRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER: usize = 8 + 4 + 8;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_container(
    magic: &[u8; 8],
    version: u32,
    manifest: &Value,
    payload: &[f64],
) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER + json.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_container(
    magic: &[u8; 8],
    version: u32,
    bytes: &[u8],
) -> Result<(Value, Vec<f64>)> {
    let what = String::from_utf8_lossy(magic).into_owned();
    if bytes.len() < HEADER || &bytes[..8] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Format(format!(
            "{what} version {found} is not supported (expected {version})"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER..];
    if len > body.len() || (body.len() - len) % 8 != 0 {
        return Err(Error::Format(format!("{what} is truncated")));
    }
    let manifest: Value = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Format(format!("{what} manifest: {e}")))?;
    let payload = body[len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((manifest, payload))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub role: String,
    pub config: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: String,
    pub config: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() * 8,
            });
            payload.extend_from_slice(t.data());
        }
        let manifest = CheckpointManifest {
            role: self.role.clone(),
            config: self.config.clone(),
            tensors: entries,
        };
        let manifest = serde_json::to_value(manifest).expect("manifest serializes");
        encode_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = decode_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bytes)?;
        let manifest: CheckpointManifest = serde_json::from_value(manifest)
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset / 8;
            if e.offset % 8 != 0 || start + n > payload.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` lies outside the payload",
                    e.name
                )));
            }
            let t = Tensor::new(e.shape, payload[start..start + n].to_vec())
                .map_err(|err| Error::Format(format!("tensor `{}`: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            role: manifest.role,
            config: manifest.config,
            tensors,
        })
    }

    /// Writes the file and returns its hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Reads the file, returning it with its hash.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, sha256_hex(&bytes)))
    }

    pub fn expect_role(&self, role: &str) -> Result<()> {
        if self.role != role {
            return Err(Error::Format(format!(
                "checkpoint holds a {} but a {role} was expected",
                self.role
            )));
        }
        Ok(())
    }
}

pub const BACKBONE_ROLE: &str = "backbone";
pub const RETRIEVER_ROLE: &str = "retriever";

impl Backbone {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            role: BACKBONE_ROLE.into(),
            config: serde_json::to_value(self.config()).expect("config serializes"),
            tensors: self.named_tensors(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_role(BACKBONE_ROLE)?;
        let config: ModelConfig = serde_json::from_value(ckpt.config)
            .map_err(|e| Error::Format(format!("backbone config: {e}")))?;
        Backbone::from_tensors(config, ckpt.tensors)
    }
}
