//! Per-artifact manifests: a config snapshot plus content hashes of every
//! input and output, enough to decide whether a sweep cell can be skipped.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub params: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hash_bytes(&bytes))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, params: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            params,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.into(), hash_file(path)?);
        Ok(())
    }

    pub fn input_hash(&mut self, key: &str, hash: &str) {
        self.inputs.insert(key.into(), hash.into());
    }

    pub fn output_file(&mut self, key: &str, path: &Path) -> Result<()> {
        self.outputs.insert(key.into(), hash_file(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// True when a manifest exists for the same command/params/inputs and all
/// recorded outputs are still present with matching hashes.
pub fn step_is_done(
    dir: &Path,
    command: &str,
    params: &serde_json::Value,
    inputs: &BTreeMap<String, String>,
) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join("manifest.json")) else {
        return false;
    };
    let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
        return false;
    };
    if m.command != command || &m.params != params || &m.inputs != inputs {
        return false;
    }
    for (rel, expected) in &m.outputs {
        let p = dir.join(rel);
        match hash_file(&p) {
            Ok(h) if &h == expected => {}
            _ => return false,
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_skip_logic() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        std::fs::write(d.join("out.bin"), b"payload").unwrap();
        let mut m = Manifest::new("train", serde_json::json!({"seed": 42}));
        m.input_hash("data", "abc");
        m.output_file("out.bin", &d.join("out.bin")).unwrap();
        m.write(d).unwrap();

        let inputs = m.inputs.clone();
        assert!(step_is_done(d, "train", &serde_json::json!({"seed": 42}), &inputs));
        // changed params
        assert!(!step_is_done(d, "train", &serde_json::json!({"seed": 43}), &inputs));
        // changed inputs
        let mut other = inputs.clone();
        other.insert("data".into(), "zzz".into());
        assert!(!step_is_done(d, "train", &serde_json::json!({"seed": 42}), &other));
        // corrupted output
        std::fs::write(d.join("out.bin"), b"tampered").unwrap();
        assert!(!step_is_done(d, "train", &serde_json::json!({"seed": 42}), &inputs));
    }
}
