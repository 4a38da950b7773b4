use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Record, StoreError};

/// A copy of the store log plus its SHA-256 digest. On disk the digest
/// lives next to the log copy in `<file>.sha256`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub log: Vec<u8>,
    pub digest: String,
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".sha256");
    PathBuf::from(name)
}

impl Snapshot {
    pub(super) fn from_records(records: &[Record]) -> Self {
        let mut log = Vec::new();
        for record in records {
            log.extend(serde_json::to_vec(record).expect("record serializes"));
            log.push(b'\n');
        }
        let digest = digest_hex(&log);
        Snapshot { log, digest }
    }

    pub fn verify(&self) -> Result<(), StoreError> {
        if digest_hex(&self.log) == self.digest {
            Ok(())
        } else {
            Err(StoreError::DigestMismatch)
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<(), StoreError> {
        fs::write(path, &self.log)?;
        fs::write(digest_path(path), format!("{}\n", self.digest))?;
        Ok(())
    }

    /// Reads a snapshot without verifying it; `ObeStore::restore` does that.
    pub fn read_from(path: &Path) -> Result<Self, StoreError> {
        let log = fs::read(path)?;
        let digest = fs::read_to_string(digest_path(path))?.trim().to_string();
        Ok(Snapshot { log, digest })
    }
}
