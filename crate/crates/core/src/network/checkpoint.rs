//! Binary checkpoint format.
//!
//! ```text
//! "MSAL" | version: u32 LE | config fingerprint: [u8; 32]
//! | manifest length: u64 LE | manifest (JSON) | f32 LE payloads
//! ```
//!
//! Manifest offsets are in bytes from the start of the payload section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MobileSalConfig;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MSAL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
    kind: ParamKind,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: MobileSalConfig,
    tensors: Vec<Entry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises `store` (values only) in checkpoint format.
pub fn encode(config: &MobileSalConfig, store: &ParamStore<f32>) -> Vec<u8> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(name, p)| {
            let e = Entry {
                name: name.to_string(),
                shape: p.value.shape().dims(),
                kind: p.kind,
                offset,
            };
            offset += p.value.len() * 4;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        config: config.clone(),
        tensors,
    })
    .expect("manifest serialises");

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config.fingerprint());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint. When `expected` is given its fingerprint must match
/// the file's.
pub fn decode(bytes: &[u8], expected: Option<&MobileSalConfig>) -> Result<(MobileSalConfig, ParamStore<f32>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported version {version}")));
    }
    let fingerprint: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
    if let Some(cfg) = expected {
        let want = cfg.fingerprint();
        if want != fingerprint {
            return Err(Error::Fingerprint {
                expected: hex(&want),
                found: hex(&fingerprint),
            });
        }
    }
    let mlen = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    let payload_start = HEADER_LEN
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    if manifest.config.fingerprint() != fingerprint {
        return Err(Error::Corrupt("manifest config does not match header fingerprint".into()));
    }

    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    let mut expected_len = 0;
    for e in &manifest.tensors {
        let shape = Shape::from_dims(&e.shape).map_err(|err| Error::Corrupt(format!("{}: {err}", e.name)))?;
        let len = shape.numel() * 4;
        let end = e.offset.checked_add(len).filter(|&end| end <= payload.len()).ok_or_else(|| {
            Error::Corrupt(format!(
                "tensor `{}` needs bytes {}..{} but payload has {}",
                e.name,
                e.offset,
                e.offset + len,
                payload.len()
            ))
        })?;
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store
            .insert(&e.name, Tensor::from_vec(shape, data)?, e.kind)
            .map_err(|err| Error::Corrupt(err.to_string()))?;
        expected_len = expected_len.max(end);
    }
    if expected_len != payload.len() {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, manifest describes {}",
            payload.len(),
            expected_len
        )));
    }
    Ok((manifest.config, store))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save(path: &Path, config: &MobileSalConfig, store: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(config, store);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("writing checkpoint {}", path.display()), e)
    })
}

pub fn load(path: &Path, expected: Option<&MobileSalConfig>) -> Result<(MobileSalConfig, ParamStore<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (MobileSalConfig, ParamStore<f32>) {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.5, -0.0]).unwrap(), ParamKind::Weight)
            .unwrap();
        s.insert("a.bias", Tensor::full(Shape::vector(3), f32::MIN_POSITIVE), ParamKind::Bias)
            .unwrap();
        (MobileSalConfig::toy(), s)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, s) = tiny();
        let (c2, s2) = decode(&encode(&cfg, &s), Some(&cfg)).unwrap();
        assert_eq!(c2, cfg);
        assert!(s.bit_eq(&s2));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let (cfg, s) = tiny();
        let mut bytes = encode(&cfg, &s);
        bytes.pop();
        assert!(matches!(decode(&bytes, None), Err(Error::Corrupt(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, None), Err(Error::Corrupt(_))));
    }
}
