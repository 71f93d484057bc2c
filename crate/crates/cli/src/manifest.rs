//! Run manifests: what was run, with which config, and hashes of what it
//! read and wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io, CliError, Result};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub git_hash: Option<String>,
    /// Full config echo in INI form.
    pub config: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub jobs: Option<usize>,
    /// Files read by the run, by role.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the run, by path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io(path))?))
}

fn git_hash() -> Option<String> {
    let try_in = |dir: &Path| {
        let out = std::process::Command::new("git")
            .args(["rev-parse", "HEAD"])
            .current_dir(dir)
            .output()
            .ok()?;
        out.status
            .success()
            .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
    };
    std::env::current_dir()
        .ok()
        .and_then(|d| try_in(&d))
        .or_else(|| try_in(Path::new(env!("CARGO_MANIFEST_DIR"))))
}

impl Manifest {
    pub fn new(command: &str, config: &str, seeds: Vec<u64>, jobs: Option<usize>) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_hash: git_hash(),
            config: config.to_string(),
            config_sha256: sha256_hex(config.as_bytes()),
            seeds,
            jobs,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Hash every regular file under `dir` except the manifest itself.
    pub fn hash_outputs(&mut self, dir: &Path) -> Result<()> {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).map_err(io(&d))? {
                let p = entry.map_err(io(&d))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != FILE_NAME) {
                    let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                    self.artifacts.insert(rel, file_sha256(&p)?);
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?;
        std::fs::write(&path, text + "\n").map_err(io(&path))
    }
}
