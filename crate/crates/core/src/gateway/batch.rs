use std::collections::BTreeMap;
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Gateway, GatewayError, Record, SubmitOutcome};
use crate::digest::sha256_hex;
use crate::model::ValidationReport;

pub const MANIFEST_FILE: &str = "batch.json";

/// One line of `batch.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchEntry {
    pub record_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BatchManifest {
    Wrapped { entries: Vec<BatchEntry> },
    Bare(Vec<BatchEntry>),
}

/// Parses `batch.json`: `{"entries": [...]}` or a bare array of entries.
pub fn parse_batch_manifest(bytes: &[u8]) -> Result<Vec<BatchEntry>, String> {
    match serde_json::from_slice::<BatchManifest>(bytes) {
        Ok(BatchManifest::Wrapped { entries } | BatchManifest::Bare(entries)) => Ok(entries),
        Err(_) => Err(match serde_json::from_slice::<serde_json::Value>(bytes) {
            Err(e) => e.to_string(),
            Ok(_) => "expected a list of {record_file, blob_file?, content_type?} entries".to_string(),
        }),
    }
}

/// Access to the files of an uploaded batch, addressed by manifest paths.
pub trait BatchSource {
    /// `Ok(None)` when the file does not exist.
    fn read(&self, relative: &str) -> io::Result<Option<Vec<u8>>>;
}

/// Manifest paths are relative and may not climb out of the batch root.
fn safe_relative(relative: &str) -> Option<PathBuf> {
    let path = Path::new(relative);
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

/// A batch laid out in a directory.
pub struct DirectorySource {
    root: PathBuf,
}

impl DirectorySource {
    pub fn new(root: &Path) -> Self {
        DirectorySource {
            root: root.to_path_buf(),
        }
    }
}

impl BatchSource for DirectorySource {
    fn read(&self, relative: &str) -> io::Result<Option<Vec<u8>>> {
        let Some(rel) = safe_relative(relative) else {
            return Ok(None);
        };
        match std::fs::read(self.root.join(rel)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// A batch held in memory, typically unpacked from a tar archive.
#[derive(Default)]
pub struct ArchiveSource {
    files: BTreeMap<PathBuf, Vec<u8>>,
}

impl ArchiveSource {
    pub fn insert(&mut self, relative: &str, content: Vec<u8>) {
        if let Some(rel) = safe_relative(relative) {
            self.files.insert(rel, content);
        }
    }

    /// Unpacks regular files from a tar stream. Entries with unsafe paths
    /// are ignored; nothing touches the filesystem.
    pub fn from_tar(bytes: &[u8]) -> io::Result<ArchiveSource> {
        let mut source = ArchiveSource::default();
        let mut archive = tar::Archive::new(bytes);
        for entry in archive.entries()? {
            let mut entry = entry?;
            if !entry.header().entry_type().is_file() {
                continue;
            }
            let path = entry.path()?.to_string_lossy().into_owned();
            let mut content = Vec::new();
            entry.read_to_end(&mut content)?;
            source.insert(&path, content);
        }
        Ok(source)
    }
}

impl BatchSource for ArchiveSource {
    fn read(&self, relative: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(safe_relative(relative).and_then(|rel| self.files.get(&rel).cloned()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchTotals {
    pub received: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub duplicate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum RecordStatus {
    Accepted {
        entry_id: String,
    },
    Duplicate {
        entry_id: String,
    },
    Rejected {
        entry_id: String,
        report: ValidationReport,
    },
    /// The record could not be processed at all (missing file, bad envelope,
    /// unknown task). Counted as rejected.
    Failed {
        code: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub index: usize,
    pub record_file: String,
    #[serde(flatten)]
    pub status: RecordStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    /// Derived from the manifest bytes, so a resubmission has the same id.
    pub batch_id: String,
    pub totals: BatchTotals,
    pub outcomes: Vec<RecordOutcome>,
}

impl<'a> Gateway<'a> {
    /// Processes every manifest entry in order. Per-record problems become
    /// outcomes; only an unreadable manifest or a storage failure aborts.
    pub fn submit_batch(&self, source: &dyn BatchSource) -> Result<BatchReport, GatewayError> {
        let manifest_bytes = source
            .read(MANIFEST_FILE)?
            .ok_or_else(|| GatewayError::MalformedManifest(format!("{MANIFEST_FILE} is missing")))?;
        let entries = parse_batch_manifest(&manifest_bytes).map_err(GatewayError::MalformedManifest)?;
        let mut report = BatchReport {
            batch_id: format!("b{}", &sha256_hex(&manifest_bytes)[..16]),
            totals: BatchTotals::default(),
            outcomes: Vec::with_capacity(entries.len()),
        };
        for (index, entry) in entries.iter().enumerate() {
            let status = match self.submit_entry(source, entry) {
                Ok(SubmitOutcome::Accepted { entry_id }) => RecordStatus::Accepted { entry_id },
                Ok(SubmitOutcome::Duplicate { entry_id }) => RecordStatus::Duplicate { entry_id },
                Ok(SubmitOutcome::Rejected { entry_id, report }) => RecordStatus::Rejected { entry_id, report },
                Err(GatewayError::Store(e)) if e.is_io() => return Err(GatewayError::Store(e)),
                Err(e @ GatewayError::Io(_)) => return Err(e),
                Err(e) => RecordStatus::Failed {
                    code: e.code().to_string(),
                    message: e.to_string(),
                },
            };
            report.totals.received += 1;
            match status {
                RecordStatus::Accepted { .. } => report.totals.accepted += 1,
                RecordStatus::Duplicate { .. } => report.totals.duplicate += 1,
                RecordStatus::Rejected { .. } | RecordStatus::Failed { .. } => report.totals.rejected += 1,
            }
            report.outcomes.push(RecordOutcome {
                index,
                record_file: entry.record_file.clone(),
                status,
            });
        }
        Ok(report)
    }

    fn submit_entry(&self, source: &dyn BatchSource, entry: &BatchEntry) -> Result<SubmitOutcome, GatewayError> {
        let missing = |f: &str| GatewayError::MissingFile(f.to_string());
        let record_bytes = source
            .read(&entry.record_file)?
            .ok_or_else(|| missing(&entry.record_file))?;
        let record = Record::from_json(&record_bytes)?;
        if record.blob.is_some() {
            return Err(GatewayError::MalformedEnvelope(
                "batch records reference blobs through blob_file".into(),
            ));
        }
        match &entry.blob_file {
            None => self.submit(&record, None),
            Some(file) => {
                let content = source.read(file)?.ok_or_else(|| missing(file))?;
                let content_type = entry.content_type.as_deref().unwrap_or("application/octet-stream");
                self.submit(&record, Some((&content, content_type)))
            }
        }
    }
}
