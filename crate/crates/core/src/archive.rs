//! Component archive packaging and the per-node archive store.
//!
//! Archive files (`.ccar`) are a single-file container: 4-byte magic `CCAR`,
//! a 4-byte big-endian manifest length, the canonical-JSON manifest bytes,
//! then the opaque payload. The checksum of an archive is the digest of
//! manifest bytes ‖ payload: SHA-256 truncated to 128 bits, rendered as 32
//! lowercase hex chars. Identical content always dedups to the same
//! checksum, which the deploy path relies on to skip redundant transfers.

use crate::canonical;
use crate::model::{is_valid_identifier, validate_manifest, ArchiveManifest, ComponentArchive};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"CCAR";
pub const ARCHIVE_EXT: &str = "ccar";
const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid archive id {0:?}")]
    InvalidId(String),
    #[error("checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("archive {0:?} already installed with different bytes")]
    IdConflict(String),
    #[error("archive {0:?} is not installed")]
    NotFound(String),
    #[error("archive {0:?} backs a live home")]
    InUse(String),
    #[error("fetch failed: {0}")]
    FetchFailure(String),
    #[error("malformed archive: {0}")]
    Malformed(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

impl ArchiveError {
    /// Stable machine-readable code used on the wire and by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            ArchiveError::InvalidManifest(_) => "invalid_manifest",
            ArchiveError::InvalidId(_) => "invalid_id",
            ArchiveError::ChecksumMismatch { .. } => "checksum_mismatch",
            ArchiveError::IdConflict(_) => "id_conflict",
            ArchiveError::NotFound(_) => "not_found",
            ArchiveError::InUse(_) => "in_use",
            ArchiveError::FetchFailure(_) => "fetch_failure",
            ArchiveError::Malformed(_) => "malformed_archive",
            ArchiveError::Io(_) => "io_failure",
        }
    }
}

/// Digest of manifest bytes ‖ payload: SHA-256/128, lowercase hex.
pub fn digest(manifest_bytes: &[u8], payload: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(manifest_bytes);
    hasher.update(payload);
    let out = hasher.finalize();
    hex_lower(&out[..16])
}

fn hex_lower(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Pack a manifest and payload into an archive value.
///
/// Deterministic: identical inputs yield an identical checksum and, via
/// [`encode_archive`], bit-identical files.
pub fn pack(manifest: ArchiveManifest, payload: Vec<u8>) -> Result<ComponentArchive, ArchiveError> {
    let errs = validate_manifest(&manifest);
    if !errs.is_empty() {
        let joined = errs
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(ArchiveError::InvalidManifest(joined));
    }
    let manifest_bytes =
        canonical::to_bytes(&manifest).map_err(|e| ArchiveError::Malformed(e.to_string()))?;
    let checksum = digest(&manifest_bytes, &payload);
    Ok(ComponentArchive {
        manifest,
        payload,
        checksum,
    })
}

/// Encode an archive into its single-file `.ccar` representation.
pub fn encode_archive(archive: &ComponentArchive) -> Result<Vec<u8>, ArchiveError> {
    let manifest_bytes = canonical::to_bytes(&archive.manifest)
        .map_err(|e| ArchiveError::Malformed(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + archive.payload.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&archive.payload);
    Ok(out)
}

/// Decode a `.ccar` file, recomputing the checksum from its content.
pub fn decode_archive(bytes: &[u8]) -> Result<ComponentArchive, ArchiveError> {
    if bytes.len() < 8 {
        return Err(ArchiveError::Malformed("file shorter than header".into()));
    }
    if &bytes[0..4] != ARCHIVE_MAGIC {
        return Err(ArchiveError::Malformed("bad magic".into()));
    }
    let len = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + len {
        return Err(ArchiveError::Malformed("manifest length out of range".into()));
    }
    let manifest_bytes = &bytes[8..8 + len];
    let manifest: ArchiveManifest = canonical::from_slice(manifest_bytes)
        .map_err(|e| ArchiveError::Malformed(format!("manifest: {e}")))?;
    let payload = bytes[8 + len..].to_vec();
    let checksum = digest(manifest_bytes, &payload);
    Ok(ComponentArchive {
        manifest,
        payload,
        checksum,
    })
}

/// Verify that an archive value's claimed checksum matches its content.
pub fn verify_archive(archive: &ComponentArchive) -> Result<(), ArchiveError> {
    let manifest_bytes = canonical::to_bytes(&archive.manifest)
        .map_err(|e| ArchiveError::Malformed(e.to_string()))?;
    let actual = digest(&manifest_bytes, &archive.payload);
    if actual != archive.checksum {
        return Err(ArchiveError::ChecksumMismatch {
            expected: archive.checksum.clone(),
            actual,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub checksum: String,
    pub byte_size: u64,
}

/// Filesystem-backed archive store: `<root>/<archive_id>.ccar` plus
/// `<root>/index.json`. Mutations follow a write-temp-then-rename
/// discipline with the index rename as the commit point, so an interrupted
/// install leaves no index entry.
#[derive(Debug)]
pub struct ArchiveStore {
    root: PathBuf,
    index: BTreeMap<String, IndexEntry>,
}

impl ArchiveStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ArchiveError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let index_path = root.join(INDEX_FILE);
        let index = if index_path.exists() {
            let bytes = fs::read(&index_path)?;
            canonical::from_slice(&bytes)
                .map_err(|e| ArchiveError::Malformed(format!("index: {e}")))?
        } else {
            BTreeMap::new()
        };
        Ok(ArchiveStore { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn archive_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.{ARCHIVE_EXT}"))
    }

    fn commit_index(&self) -> Result<(), ArchiveError> {
        let bytes =
            canonical::to_bytes(&self.index).map_err(|e| ArchiveError::Malformed(e.to_string()))?;
        let tmp = self.root.join(".index.tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, self.root.join(INDEX_FILE))?;
        Ok(())
    }

    /// Push-mode install. Idempotent for identical bytes; a different
    /// archive under an existing id is rejected.
    pub fn install(&mut self, id: &str, archive: &ComponentArchive) -> Result<(), ArchiveError> {
        if !is_valid_identifier(id) {
            return Err(ArchiveError::InvalidId(id.to_string()));
        }
        verify_archive(archive)?;
        let bytes = encode_archive(archive)?;
        if let Some(existing) = self.index.get(id) {
            if existing.checksum == archive.checksum {
                return Ok(());
            }
            return Err(ArchiveError::IdConflict(id.to_string()));
        }
        let tmp = self.root.join(format!(".{id}.tmp"));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, self.archive_path(id))?;
        self.index.insert(
            id.to_string(),
            IndexEntry {
                checksum: archive.checksum.clone(),
                byte_size: bytes.len() as u64,
            },
        );
        self.commit_index()
    }

    /// Pull-mode install: fetch from a `file://` or `http://` URL, then
    /// install exactly as push mode would. When the caller knows the
    /// expected checksum the fetched bytes are verified against it before
    /// anything is committed.
    pub fn install_from_url(
        &mut self,
        id: &str,
        url: &str,
        expected_checksum: Option<&str>,
    ) -> Result<(), ArchiveError> {
        let bytes = fetch_url(url)?;
        let archive = decode_archive(&bytes)?;
        if let Some(expected) = expected_checksum {
            if archive.checksum != expected {
                return Err(ArchiveError::ChecksumMismatch {
                    expected: expected.to_string(),
                    actual: archive.checksum,
                });
            }
        }
        self.install(id, &archive)
    }

    pub fn retrieve(&self, id: &str) -> Result<ComponentArchive, ArchiveError> {
        let entry = self
            .index
            .get(id)
            .ok_or_else(|| ArchiveError::NotFound(id.to_string()))?;
        let bytes = fs::read(self.archive_path(id))?;
        let archive = decode_archive(&bytes)?;
        if archive.checksum != entry.checksum {
            return Err(ArchiveError::ChecksumMismatch {
                expected: entry.checksum.clone(),
                actual: archive.checksum,
            });
        }
        Ok(archive)
    }

    /// Installed ids, sorted lexicographically.
    pub fn list(&self) -> Vec<String> {
        self.index.keys().cloned().collect()
    }

    pub fn entry(&self, id: &str) -> Option<&IndexEntry> {
        self.index.get(id)
    }

    pub fn uninstall(&mut self, id: &str) -> Result<(), ArchiveError> {
        if self.index.remove(id).is_none() {
            return Err(ArchiveError::NotFound(id.to_string()));
        }
        self.commit_index()?;
        fs::remove_file(self.archive_path(id))?;
        Ok(())
    }

    /// Replace an installed archive's bytes. The caller is responsible for
    /// checking that no live home still runs the old version.
    pub fn update(&mut self, id: &str, archive: &ComponentArchive) -> Result<(), ArchiveError> {
        if !self.index.contains_key(id) {
            return Err(ArchiveError::NotFound(id.to_string()));
        }
        verify_archive(archive)?;
        let bytes = encode_archive(archive)?;
        let tmp = self.root.join(format!(".{id}.tmp"));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, self.archive_path(id))?;
        self.index.insert(
            id.to_string(),
            IndexEntry {
                checksum: archive.checksum.clone(),
                byte_size: bytes.len() as u64,
            },
        );
        self.commit_index()
    }

    /// Re-verify every indexed archive against its recorded checksum.
    pub fn verify_all(&self) -> Result<(), ArchiveError> {
        for id in self.index.keys() {
            self.retrieve(id)?;
        }
        Ok(())
    }
}

fn fetch_url(url: &str) -> Result<Vec<u8>, ArchiveError> {
    if let Some(path) = url.strip_prefix("file://") {
        return fs::read(path).map_err(|e| ArchiveError::FetchFailure(format!("{url}: {e}")));
    }
    if let Some(rest) = url.strip_prefix("http://") {
        return http_get(rest).map_err(|e| ArchiveError::FetchFailure(format!("{url}: {e}")));
    }
    Err(ArchiveError::FetchFailure(format!(
        "unsupported url scheme in {url:?}"
    )))
}

/// Minimal HTTP/1.1 GET, enough to pull archives from plain file servers.
fn http_get(host_and_path: &str) -> std::io::Result<Vec<u8>> {
    let (authority, path) = match host_and_path.find('/') {
        Some(i) => (&host_and_path[..i], &host_and_path[i..]),
        None => (host_and_path, "/"),
    };
    let addr = if authority.contains(':') {
        authority.to_string()
    } else {
        format!("{authority}:80")
    };
    let mut stream = TcpStream::connect(&addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: {authority}\r\nConnection: close\r\n\r\n"
    )?;
    let mut response = Vec::new();
    stream.read_to_end(&mut response)?;
    let header_end = response
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or_else(|| std::io::Error::other("missing header terminator"))?;
    let head = String::from_utf8_lossy(&response[..header_end]);
    let status = head.lines().next().unwrap_or_default();
    if !status.contains(" 200 ") {
        return Err(std::io::Error::other(format!("http status: {status}")));
    }
    Ok(response[header_end + 4..].to_vec())
}
