//! Run manifests: what was run, with which inputs, and what it produced.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub versions: BTreeMap<String, String>,
    pub threads: usize,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub stages: Vec<Stage>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, threads: usize, config: serde_json::Value) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("prefnet".to_string(), prefnet::VERSION.to_string());
        versions.insert(
            "prefnet-cli".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        );
        versions.insert(
            "network-format".to_string(),
            format!(
                "{}/{}",
                prefnet::net::NETWORK_FORMAT,
                prefnet::net::NETWORK_FORMAT_VERSION
            ),
        );
        RunManifest {
            tool: "prefnet".into(),
            command: command.into(),
            versions,
            threads,
            config,
            seeds: BTreeMap::new(),
            inputs: vec![],
            stages: vec![],
            outputs: vec![],
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(digest(path, path)?);
        Ok(())
    }

    /// Run `f`, recording its wall time under `name`.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.push(Stage {
            name: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    /// Digest every file in `files` and write the manifest into `dir`.
    pub fn finish(
        mut self,
        dir: &Path,
        file_name: &str,
        files: &[PathBuf],
    ) -> Result<PathBuf, CliError> {
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(f);
            self.outputs.push(digest(f, rel)?);
        }
        let path = dir.join(file_name);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), CliError> {
    let mut file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        total += n as u64;
        hasher.update(&buf[..n]);
    }
    let hex = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok((hex, total))
}

fn digest(path: &Path, recorded: &Path) -> Result<FileDigest, CliError> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(FileDigest {
        path: recorded.to_path_buf(),
        sha256,
        bytes,
    })
}
