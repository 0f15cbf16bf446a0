use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use earballs_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
    /// Files hashed; directories hash every file's relative path and bytes
    /// in sorted order.
    pub files: usize,
}

/// Record of one invocation, written before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub toolkit: String,
    pub toolkit_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub seed_source: String,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            toolkit: "earballs".into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: argv.to_vec(),
            config: serde_json::Value::Null,
            seed: None,
            seed_source: "none".into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `run_manifest.json` into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join("run_manifest.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_path(path: &Path) -> Result<InputHash> {
    let mut h = Sha256::new();
    let mut files = 0;
    if path.is_dir() {
        for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
            let entry =
                entry.map_err(|e| Error::Config(format!("cannot walk {}: {e}", path.display())))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(path).expect("under root");
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(entry.path()).map_err(|e| io(entry.path(), e))?);
            files += 1;
        }
    } else {
        h.update(fs::read(path).map_err(|e| io(path, e))?);
        files = 1;
    }
    Ok(InputHash {
        path: path.display().to_string(),
        sha256: hex(&h.finalize()),
        files,
    })
}
