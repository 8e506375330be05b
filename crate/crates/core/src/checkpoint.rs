//! Checkpoint files.
//!
//! Layout: the 8-byte magic `CEDCKPT\0`, a little-endian `u32` manifest
//! length, the JSON [`Manifest`], then the payload: one tensor dump
//! container per parameter in manifest order. The manifest records the
//! SHA-256 of the payload.

use std::fmt::Write as _;
use std::path::Path;

use cednet_tensor::{dump, DType, Element};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::executor::ParamStore;

pub const MAGIC: &[u8; 8] = b"CEDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte range of this tensor's dump inside the payload.
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub payload_sha256: String,
    /// Free-form context, typically the model config and head settings.
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn encode_checkpoint<T: Element>(store: &ParamStore<T>, meta: serde_json::Value) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let bytes = dump::encode(t);
        entries.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len(), length: bytes.len() });
        payload.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        seed: store.seed,
        entries,
        payload_sha256: hex(&Sha256::digest(&payload)),
        meta,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Reads only the manifest.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok((manifest, 12 + len))
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<(ParamStore<T>, Manifest)> {
    let (manifest, start) = decode_manifest(bytes)?;
    let payload = &bytes[start..];
    let actual = hex(&Sha256::digest(payload));
    if actual != manifest.payload_sha256 {
        return Err(Error::Checksum { expected: manifest.payload_sha256.clone(), actual });
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint holds {:?}, requested {:?}", manifest.dtype, T::DTYPE)));
    }
    let mut store = ParamStore::new(manifest.seed);
    for e in &manifest.entries {
        let chunk = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| Error::Checkpoint(format!("entry {} lies outside the payload", e.name)))?;
        let (t, used) = dump::decode::<T>(chunk)?;
        if used != e.length || t.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!("entry {} does not match its manifest record", e.name)));
        }
        if store.insert(e.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("entry {} appears twice", e.name)));
        }
    }
    Ok((store, manifest))
}

pub fn save_checkpoint<T: Element>(store: &ParamStore<T>, meta: serde_json::Value, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, meta))?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(ParamStore<T>, Manifest)> {
    decode_checkpoint(&std::fs::read(path)?)
}
