use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use biasprobe::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: String,
    pub command: String,
    /// First eight bytes (big-endian) of SHA-256 over the canonical JSON of
    /// `parameters`.
    pub config_digest: u64,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
}

/// Digest of a resolved parameter set. `serde_json` maps keep keys sorted,
/// so the encoding is canonical.
pub fn config_digest(parameters: &serde_json::Value) -> u64 {
    let bytes = serde_json::to_vec(parameters).expect("JSON values always serialise");
    let hash = Sha256::digest(&bytes);
    u64::from_be_bytes(hash[..8].try_into().expect("SHA-256 is 32 bytes"))
}

impl RunManifest {
    pub fn new(command: &str, parameters: &impl Serialize, seed: Option<u64>, artifacts: Vec<PathBuf>) -> Result<Self> {
        let parameters =
            serde_json::to_value(parameters).map_err(|e| Error::InvalidParameter(format!("parameters: {e}")))?;
        Ok(Self {
            command_line: std::env::args().collect::<Vec<_>>().join(" "),
            command: command.to_string(),
            config_digest: config_digest(&parameters),
            parameters,
            seed,
            artifacts,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidParameter(format!("manifest: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(path)
    }
}
