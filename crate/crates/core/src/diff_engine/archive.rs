//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "ICEPARAM"
//! format_version   u32
//! manifest_len     u64
//! manifest         manifest_len bytes of UTF-8 JSON
//! payload          f64 values, little-endian, in manifest order
//! ```
//!
//! The manifest lists every array (name, group, shape, offset, len), the
//! SHA-256 of the payload bytes, and a free-form `meta` object owned by the
//! caller.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ParamEntry, ParameterSet};
use super::EngineError;

pub const MAGIC: &[u8; 8] = b"ICEPARAM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    entries: Vec<ParamEntry>,
    payload_sha256: String,
    meta: serde_json::Value,
}

fn payload_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.len() * 8);
    for v in params.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_archive<W: Write>(
    mut w: W,
    params: &ParameterSet,
    meta: &serde_json::Value,
) -> Result<(), EngineError> {
    let payload = payload_bytes(params);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        entries: params.entries().to_vec(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta: meta.clone(),
    };
    let manifest = serde_json::to_vec_pretty(&manifest).map_err(|e| EngineError::Archive(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<(ParameterSet, serde_json::Value), EngineError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EngineError::Archive("not a parameter archive (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(EngineError::Archive(format!(
            "archive format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let manifest_len = u64::from_le_bytes(u64buf) as usize;
    let mut manifest = vec![0u8; manifest_len];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest).map_err(|e| EngineError::Archive(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(EngineError::Archive("manifest version disagrees with header".into()));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(EngineError::Archive(format!("payload of {} bytes is not a whole number of f64", payload.len())));
    }
    if hex::encode(Sha256::digest(&payload)) != manifest.payload_sha256 {
        return Err(EngineError::Archive("payload digest mismatch (corrupt archive)".into()));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ParameterSet::from_parts(manifest.entries, data)?;
    Ok((params, manifest.meta))
}
