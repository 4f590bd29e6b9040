//! Output files and the run manifest.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Common, Failure};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

impl FileDigest {
    /// Digest of a file, recorded under its base name only so that
    /// manifests do not depend on where the file lives.
    pub fn of_path(path: &Path) -> Result<Self, Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let file = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(FileDigest { file, sha256: sha256_hex(&bytes) })
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    /// Options after merging the config file and flags.
    config: &'a C,
    inputs: &'a [FileDigest],
    outputs: Vec<FileDigest>,
    /// SHA-256 over the `name sha256` lines of every output.
    content_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    details: Option<&'a serde_json::Value>,
}

/// What a subcommand produced.
#[derive(Default)]
pub struct Outcome {
    /// Human-readable report for stdout.
    pub text: String,
    /// Named output files, written in order under `--out`.
    pub files: Vec<(String, Vec<u8>)>,
    pub inputs: Vec<FileDigest>,
    pub details: Option<serde_json::Value>,
    /// Set when a verification step failed; reported after writing outputs.
    pub failed: Option<String>,
}

impl Outcome {
    pub fn file(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    /// Prints the report, writes files plus `manifest.json` when `--out`
    /// is set, and turns a recorded verification failure into exit code 3.
    pub fn finish<C: Serialize>(self, command: &str, config: &C, common: &Common) -> Result<(), Failure> {
        print!("{}", self.text);
        if let Some(dir) = &common.out {
            fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
            let mut outputs = Vec::new();
            for (name, bytes) in &self.files {
                let path = dir.join(name);
                fs::write(&path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                outputs.push(FileDigest { file: name.clone(), sha256: sha256_hex(bytes) });
            }
            let listing: String = outputs.iter().map(|d| format!("{} {}\n", d.file, d.sha256)).collect();
            let manifest = Manifest {
                tool: "speedbump",
                version: env!("CARGO_PKG_VERSION"),
                command,
                config,
                inputs: &self.inputs,
                content_hash: sha256_hex(listing.as_bytes()),
                outputs,
                details: self.details.as_ref(),
            };
            let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            json.push('\n');
            let path = dir.join("manifest.json");
            fs::write(&path, json).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        }
        match self.failed {
            Some(msg) => Err(Failure::Verification(msg)),
            None => Ok(()),
        }
    }
}
