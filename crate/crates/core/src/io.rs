//! JSON checkpoint envelopes and content hashing.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    kind: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// The exact bytes [`save_checkpoint`] writes.
pub fn encode_checkpoint<T: Serialize>(kind: &str, body: &T) -> Result<Vec<u8>> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        body,
    };
    Ok(serde_json::to_vec(&env)?)
}

/// SHA-256 of a checkpoint without touching disk.
pub fn checkpoint_hash<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    Ok(sha256_hex(&encode_checkpoint(kind, body)?))
}

/// Writes `body` wrapped in a versioned envelope; returns the file's SHA-256.
pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<String> {
    let bytes = encode_checkpoint(kind, body)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let header: Header = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Schema(format!("{}: not a checkpoint ({e})", path.display())))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            header.schema_version
        )));
    }
    if header.kind != kind {
        return Err(Error::Schema(format!(
            "{}: holds a {} checkpoint, expected {kind}",
            path.display(),
            header.kind
        )));
    }
    let env: Envelope<T> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    Ok(env.body)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
