use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Content id in the style of a git blob hash, over SHA-256.
pub fn artifact_id(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{:x}", h.finalize())
}

/// Hash of every file under `images/` and `labels/`, in path order.
pub fn dataset_hash(root: &Path) -> std::io::Result<String> {
    let mut files = Vec::new();
    for sub in ["images", "labels"] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            continue;
        }
        for e in fs::read_dir(&dir)? {
            let e = e?;
            if e.file_type()?.is_file() {
                files.push(format!("{sub}/{}", e.file_name().to_string_lossy()));
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        let bytes = fs::read(root.join(f))?;
        h.update(f.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("sha256:{:x}", h.finalize()))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub datasets: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// Wall time of individual training runs, keyed `label/seed<N>`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub run_seconds: BTreeMap<String, f64>,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            datasets: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            run_seconds: BTreeMap::new(),
            wall_seconds: 0.0,
        }
    }

    pub fn dataset(&mut self, root: &Path) -> std::io::Result<()> {
        self.datasets
            .insert(root.display().to_string(), dataset_hash(root)?);
        Ok(())
    }

    /// Write `bytes` to `dir/name` and record its id.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(dir.join(name), bytes)?;
        self.record(dir, name)
    }

    /// Record an already written file.
    pub fn record(&mut self, dir: &Path, name: &str) -> std::io::Result<()> {
        let bytes = fs::read(dir.join(name))?;
        self.artifacts.insert(name.to_string(), artifact_id(&bytes));
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifact_id_matches_known_digest() {
        // sha256("blob 0\0")
        assert_eq!(
            artifact_id(b""),
            "sha256:473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn dataset_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("labels")).unwrap();
        fs::write(dir.path().join("labels/a.txt"), "0 0.5 0.5 0.1 0.1\n").unwrap();
        let a = dataset_hash(dir.path()).unwrap();
        assert_eq!(a, dataset_hash(dir.path()).unwrap());
        fs::write(dir.path().join("labels/a.txt"), "1 0.5 0.5 0.1 0.1\n").unwrap();
        assert_ne!(a, dataset_hash(dir.path()).unwrap());
    }
}
