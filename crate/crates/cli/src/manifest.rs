// SPDX-License-Identifier: MIT OR Apache-2.0

//! Provenance record written next to every artifact as
//! `<artifact>.manifest.json`.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use moesteer::container::atomic_write;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the canonical JSON form of the effective config.
    pub config_sha256: String,
    pub seeds: Value,
    pub inputs: Vec<FileDigest>,
    pub output: FileDigest,
    pub metrics: Value,
    pub created: String,
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::read(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn config_hash(cfg: &RunConfig) -> Result<String, CliError> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Writes the artifact's manifest; the artifact must already exist.
pub fn write_manifest(
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    output: &Path,
    metrics: Value,
) -> Result<(), CliError> {
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config_hash(cfg)?,
        seeds: cfg.seeds(),
        inputs: inputs.iter().map(|p| digest_file(p)).collect::<Result<_, _>>()?,
        output: digest_file(output)?,
        metrics,
        created: chrono::Utc::now().to_rfc3339(),
    };
    let text = serde_json::to_string_pretty(&m)?;
    atomic_write(&manifest_path(output), text.as_bytes())?;
    Ok(())
}
