use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_path: Option<String>,
    pub config_sha256: String,
    pub seed: u64,
    /// Stream seeds derived from the root seed, by purpose.
    pub seed_lineage: BTreeMap<String, u64>,
    pub outputs: Vec<OutputEntry>,
    pub wall_clock_secs: f64,
    pub status: String,
    pub error: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects artifacts as they are written so a failed run still lists what it flushed.
pub struct Outputs {
    dir: PathBuf,
    pub entries: Vec<OutputEntry>,
}

impl Outputs {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.entries.push(OutputEntry { file: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn table(&mut self, name: &str, t: &fbmheat::io::Table) -> std::io::Result<()> {
        let mut buf = Vec::new();
        t.write_csv(&mut buf).map_err(std::io::Error::other)?;
        self.write(name, &buf)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[derive(Debug)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatched: Vec<String>,
}

/// Re-hashes every output listed in the manifest, relative to the manifest's directory.
pub fn verify(manifest_path: &Path) -> Result<VerifyReport, String> {
    let text = fs::read_to_string(manifest_path).map_err(|e| format!("{}: {e}", manifest_path.display()))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", manifest_path.display()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut mismatched = Vec::new();
    for o in &m.outputs {
        match fs::read(dir.join(&o.file)) {
            Ok(b) if sha256_hex(&b) == o.sha256 => {}
            _ => mismatched.push(o.file.clone()),
        }
    }
    Ok(VerifyReport { checked: m.outputs.len(), mismatched })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
