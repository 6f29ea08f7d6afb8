//! Framed binary files: an 8-byte magic, a little-endian `u32` format
//! version, then a bincode payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Which run produced an artifact.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a {kind} file")]
    BadMagic { path: String, kind: &'static str },
    #[error("{path} has format version {found}, expected {expected}")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("corrupt payload in {path}: {message}")]
    Payload { path: String, message: String },
}

pub fn encode<T: Serialize>(magic: &[u8; 8], version: u32, value: &T) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 << 16);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    bincode::serialize_into(&mut out, value).expect("in-memory serialization cannot fail");
    out
}

pub fn decode<T: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    version: u32,
    kind: &'static str,
    path: &str,
) -> Result<T, PersistError> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(PersistError::BadMagic {
            path: path.to_string(),
            kind,
        });
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(PersistError::Version {
            path: path.to_string(),
            found,
            expected: version,
        });
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| PersistError::Payload {
        path: path.to_string(),
        message: e.to_string(),
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    fs::write(path, bytes).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: &Path) -> Result<Vec<u8>, PersistError> {
    fs::read(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
