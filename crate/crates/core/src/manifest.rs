//! Run provenance: content hashes of every input, embedded into each output
//! file. Embedded manifests carry no wall-clock data so outputs stay
//! byte-reproducible; timestamps go to a `<file>.manifest.json` sidecar.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of a value's canonical JSON (map keys sorted).
pub fn json_sha256<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub predictions_hash: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), version: VERSION.into(), ..Default::default() }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest is plain data")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSidecar {
    #[serde(flatten)]
    pub manifest: RunManifest,
    pub output_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Write the timestamped sidecar next to `output` (which must exist).
pub fn write_sidecar(output: &Path, manifest: &RunManifest, started_unix_ms: u128) -> Result<PathBuf> {
    let sidecar = ManifestSidecar {
        manifest: manifest.clone(),
        output_hash: if output.is_file() { file_sha256(output)? } else { String::new() },
        started_unix_ms,
        finished_unix_ms: now_unix_ms(),
    };
    let path = sidecar_path(output);
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn json_hash_ignores_field_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":[1,2],"x":1}"#).unwrap();
        assert_eq!(json_sha256(&a).unwrap(), json_sha256(&b).unwrap());
    }

    #[test]
    fn sidecar_sits_next_to_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pred.jsonl");
        std::fs::write(&out, b"{}\n").unwrap();
        let p = write_sidecar(&out, &RunManifest::new("ground"), now_unix_ms()).unwrap();
        assert_eq!(p, dir.path().join("pred.jsonl.manifest.json"));
        let s: ManifestSidecar = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(s.manifest.command, "ground");
        assert_eq!(s.output_hash, sha256_hex(b"{}\n"));
        assert!(s.finished_unix_ms >= s.started_unix_ms);
    }
}
