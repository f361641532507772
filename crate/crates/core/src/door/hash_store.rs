//! Append-only uniqueness store of attribute hashes.
//!
//! File format: one 64-character lowercase-hex SHA-256 digest per line,
//! LF-terminated, no header.

use std::collections::HashSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use thiserror::Error;

use crate::canonical::hex32;
use crate::crypto::sha256;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("hash store I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("hash store file is corrupt at line {line}")]
    Corrupt { line: usize },
}

/// SHA-256 digest of a verified attribute value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashRecord(pub [u8; 32]);

impl HashRecord {
    /// Hash of the exact UTF-8 bytes of `value`. No salt, no normalization.
    pub fn of_attribute(value: &str) -> Self {
        Self(sha256(value.as_bytes()))
    }

    pub fn from_hex(s: &str) -> Result<Self, StoreError> {
        hex32::parse(s).map(Self).map_err(StoreError::Encoding)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for HashRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashRecord({})", self.to_hex())
    }
}

struct Writer {
    file: File,
    len: u64,
}

pub struct HashStore {
    path: PathBuf,
    records: RwLock<HashSet<HashRecord>>,
    writer: Mutex<Writer>,
}

impl HashStore {
    /// Opens or creates the store at `path`. A partial trailing line, as left
    /// by a crash mid-append, is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut contents = String::new();
        file.read_to_string(&mut contents).map_err(|_| StoreError::Corrupt { line: 1 })?;

        let complete = contents.rfind('\n').map_or(0, |i| i + 1);
        if complete < contents.len() {
            tracing::warn!(path = %path.display(), "dropping partial trailing line in hash store");
            file.set_len(complete as u64)?;
            file.sync_data()?;
        }

        let mut records = HashSet::new();
        for (i, line) in contents[..complete].lines().enumerate() {
            let record = HashRecord::from_hex(line).map_err(|_| StoreError::Corrupt { line: i + 1 })?;
            records.insert(record);
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self { path, records: RwLock::new(records), writer: Mutex::new(Writer { file, len: complete as u64 }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, record: &HashRecord) -> bool {
        self.records.read().expect("hash store lock poisoned").contains(record)
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("hash store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persists `record` unless already present. Returns whether it was inserted.
    pub fn insert_if_absent(&self, record: &HashRecord) -> Result<bool, StoreError> {
        let mut writer = self.writer.lock().expect("hash store writer poisoned");
        if self.contains(record) {
            return Ok(false);
        }
        let line = format!("{}\n", record.to_hex());
        let appended = writer.file.write_all(line.as_bytes()).and_then(|()| writer.file.sync_data());
        if let Err(err) = appended {
            // Roll back so the file never holds a record the set lacks.
            let len = writer.len;
            let _ = writer.file.set_len(len);
            return Err(err.into());
        }
        writer.len += line.len() as u64;
        self.records.write().expect("hash store lock poisoned").insert(*record);
        Ok(true)
    }

    /// [`insert_if_absent`](Self::insert_if_absent) for a hex-encoded digest.
    pub fn insert_hex_if_absent(&self, hex: &str) -> Result<bool, StoreError> {
        self.insert_if_absent(&HashRecord::from_hex(hex)?)
    }
}
