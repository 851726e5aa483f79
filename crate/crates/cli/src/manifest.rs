//! Run manifests: the resolved configuration plus content hashes of every
//! input and output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

/// CSV column whose values vary from run to run.
pub const VOLATILE_COLUMN: &str = "wall_time_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    /// Relative to the output directory.
    pub outputs: Vec<FileRecord>,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
        self.inputs.push(FileRecord {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn save(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of an output file's reproducible content: CSV files have their
/// `wall_time_s` column blanked before hashing.
pub fn stable_hash(path: &Path, bytes: &[u8]) -> String {
    if path.extension().is_some_and(|e| e == "csv") {
        if let Ok(text) = std::str::from_utf8(bytes) {
            return sha256_hex(strip_column(text, VOLATILE_COLUMN).as_bytes());
        }
    }
    sha256_hex(bytes)
}

fn strip_column(text: &str, column: &str) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let Some(idx) = header.split(',').position(|h| h == column) else {
        return text.to_string();
    };
    let mut out = String::with_capacity(text.len());
    for line in std::iter::once(header).chain(lines) {
        let cells: Vec<&str> = line
            .split(',')
            .enumerate()
            .map(|(i, c)| if i == idx { "" } else { c })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volatile_column_does_not_affect_hash() {
        let a = "image_id,psnr_db,wall_time_s\nx,20,0.5\n";
        let b = "image_id,psnr_db,wall_time_s\nx,20,0.7\n";
        let c = "image_id,psnr_db,wall_time_s\nx,21,0.5\n";
        let p = Path::new("metrics.csv");
        assert_eq!(stable_hash(p, a.as_bytes()), stable_hash(p, b.as_bytes()));
        assert_ne!(stable_hash(p, a.as_bytes()), stable_hash(p, c.as_bytes()));
        assert_ne!(
            stable_hash(Path::new("a.txt"), a.as_bytes()),
            stable_hash(Path::new("a.txt"), b.as_bytes())
        );
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", &Config::default());
        m.seeds.insert("train".into(), 3);
        m.timings.insert("wall_time_s".into(), 1.5);
        let p = m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
    }
}
