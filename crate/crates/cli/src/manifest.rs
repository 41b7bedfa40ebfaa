//! Run manifests: every command writes one into its output directory,
//! recording the config snapshot, inputs, and a content hash per output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub configs: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn file_record(path: &Path) -> std::io::Result<FileRecord> {
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: Option<u64>) -> Self {
        let args: Vec<String> = std::env::args().collect();
        RunManifest {
            run_id: match seed {
                Some(s) => format!("{subcommand}-seed{s}"),
                None => subcommand.to_string(),
            },
            command: args.join(" "),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            configs: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn add_config<T: Serialize>(&mut self, name: &str, config: &T) {
        if let Ok(v) = serde_json::to_value(config) {
            self.configs.insert(name.to_string(), v);
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(file_record(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push(file_record(path)?);
        Ok(())
    }

    /// Finish the run and write `manifest.json` into the run directory.
    pub fn write(mut self, out_dir: &Path) -> std::io::Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, json)?;
        Ok(path)
    }
}
