//! Provenance and file writing.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let canonical = serde_json::to_vec(cfg).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(&canonical),
            seed: cfg.seed,
            config: cfg.clone(),
        })
    }

    /// One-line header for CSV outputs.
    pub fn comment(&self) -> String {
        format!(
            "# rdstrata config_sha256={} seed={}\n",
            self.config_sha256, self.seed
        )
    }
}

#[derive(Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::MissingInput(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<(), CliError> {
    let stamped = Stamped {
        provenance: prov.clone(),
        body,
    };
    let mut bytes =
        serde_json::to_vec_pretty(&stamped).map_err(|e| CliError::Numerical(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// CSV text produced by `render`, preceded by the provenance comment line.
pub fn write_csv(
    path: &Path,
    prov: &Provenance,
    render: impl FnOnce(&mut Vec<u8>) -> rdstrata::Result<()>,
) -> Result<(), CliError> {
    let mut bytes = prov.comment().into_bytes();
    render(&mut bytes)?;
    write_bytes(path, &bytes)
}

/// Directory-safe bandwidth label: `h1000`, `h250p5`.
pub fn h_label(h: f64) -> String {
    if h.fract() == 0.0 && h.abs() < 1e15 {
        format!("h{}", h as i64)
    } else {
        format!("h{h}").replace('.', "p")
    }
}

/// Independent seed for one pipeline stage (splitmix64 finalizer).
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(h_label(1000.0), "h1000");
        assert_eq!(h_label(250.5), "h250p5");
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, 1), stage_seed(1, 2));
        assert_ne!(stage_seed(1, 1), stage_seed(2, 1));
        assert_eq!(stage_seed(7, 3), stage_seed(7, 3));
    }
}
