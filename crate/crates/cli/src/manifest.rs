use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Failure};
use crate::table_io::write_text;

/// Record of one command run: what was asked for and a SHA-256 checksum of
/// every file it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config_path: String,
    pub output_dir: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub artifacts: BTreeMap<String, String>,
}

pub struct ManifestBuilder {
    command: &'static str,
    config_path: String,
    output_dir: String,
    seed: u64,
    started: DateTime<Utc>,
}

impl ManifestBuilder {
    pub fn start(command: &'static str, config_path: &Path, output_dir: &Path, seed: u64) -> Self {
        Self {
            command,
            config_path: config_path.display().to_string(),
            output_dir: output_dir.display().to_string(),
            seed,
            started: Utc::now(),
        }
    }

    /// Checksums `files` (relative to the output directory) and writes
    /// `manifest.json` next to them.
    pub fn finish(self, files: &[&str]) -> CliResult<RunManifest> {
        let dir = PathBuf::from(&self.output_dir);
        let mut artifacts = BTreeMap::new();
        for name in files {
            let path = dir.join(name);
            let bytes = std::fs::read(&path)
                .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
            artifacts.insert(name.to_string(), hex(&Sha256::digest(&bytes)));
        }
        let manifest = RunManifest {
            command: self.command,
            config_path: self.config_path,
            output_dir: self.output_dir,
            seed: self.seed,
            started: stamp(self.started),
            finished: stamp(Utc::now()),
            artifacts,
        };
        write_text(&dir.join("manifest.json"), &to_json(&manifest))?;
        Ok(manifest)
    }
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}
