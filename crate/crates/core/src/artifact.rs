//! Provenance stamped on every emitted artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    /// Hash of the canonical JSON form of `config`.
    pub fn of<T: Serialize>(config: &T, seed: u64) -> Result<Self> {
        Ok(Provenance { config_hash: config_hash(config)?, seed })
    }

    /// Leading comment line for CSV artifacts.
    pub fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }

    /// Parses a line written by [`Provenance::csv_comment`].
    pub fn parse_comment(line: &str) -> Option<Self> {
        let rest = line.trim().strip_prefix("# ")?;
        let mut hash = None;
        let mut seed = None;
        for part in rest.split_whitespace() {
            match part.split_once('=')? {
                ("config_hash", v) => hash = Some(v.to_string()),
                ("seed", v) => seed = v.parse().ok(),
                _ => {}
            }
        }
        Some(Provenance { config_hash: hash?, seed: seed? })
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON form, with object
/// keys sorted.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| Error::Internal(format!("hashing config: {e}")))?;
    let canonical = serde_json::to_string(&value).map_err(|e| Error::Internal(format!("hashing config: {e}")))?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Splits a CSV artifact into its provenance (if present) and the remaining text.
pub fn strip_provenance(text: &str) -> (Option<Provenance>, &str) {
    match text.split_once('\n') {
        Some((first, rest)) if first.starts_with('#') => (Provenance::parse_comment(first), rest),
        _ => (None, text),
    }
}
