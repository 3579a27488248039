//! Decoupled storage: a content-addressed blob store plus a journaled
//! metadata index with staging/production lifecycle zones and per-environment
//! outbound datasets.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! blobs/{first two hex of checksum}/{checksum}   object content
//! index/journal.log                              metadata index (JSON lines)
//! index/LOCK                                     single-process lock
//! outbound/{env}/{dataset_id}/data.csv           published dataset
//! outbound/{env}/{dataset_id}/meta.json          discovery sidecar
//! ```
//!
//! The journal is the commit point for everything: an object, entry,
//! promotion or dataset becomes visible only once its event line is durable.

mod audit;
mod types;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

pub use audit::{AuditReport, AuditViolation};
pub use types::*;

use crate::digest::{canonical_json_hash, sha256_hex};
use crate::fsutil::write_atomic;
use crate::journal::{Durability, Journal, JournalError};
use crate::model::ident::is_identifier;
use crate::model::{Outcome, SchemaRef, ValidationReport};
use crate::pipeline::RunRecord;
use crate::table::Table;
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("STORAGE_IO: {0}")]
    Io(#[from] io::Error),
    #[error("STORAGE_IO: {0}")]
    Journal(#[from] JournalError),
    #[error("STORE_LOCKED: {0} is in use by another process")]
    Locked(PathBuf),
    #[error("EMPTY_CONTENT: objects must not be empty")]
    EmptyContent,
    #[error("DANGLING_BLOB: no stored object with checksum {0}")]
    DanglingBlob(String),
    #[error("CONSTRAINT_VIOLATION: {0}")]
    Constraint(String),
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("CHECKSUM_MISMATCH: object {checksum} hashes to {actual}")]
    ChecksumMismatch { checksum: String, actual: String },
    #[error("CODE_NOT_VALIDATED: no valid CODE validation of these rows for run {run_id} against {schema}")]
    CodeNotValidated { run_id: String, schema: SchemaRef },
    #[error("DATASET_CONFLICT: {environment}/{dataset_id} is already published with different content")]
    DatasetConflict { environment: String, dataset_id: String },
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io(_) | StoreError::Journal(_) => "STORAGE_IO",
            StoreError::Locked(_) => "STORE_LOCKED",
            StoreError::EmptyContent => "EMPTY_CONTENT",
            StoreError::DanglingBlob(_) => "DANGLING_BLOB",
            StoreError::Constraint(_) => "CONSTRAINT_VIOLATION",
            StoreError::NotFound(_) => "NOT_FOUND",
            StoreError::ChecksumMismatch { .. } => "CHECKSUM_MISMATCH",
            StoreError::CodeNotValidated { .. } => "CODE_NOT_VALIDATED",
            StoreError::DatasetConflict { .. } => "DATASET_CONFLICT",
        }
    }

    /// I/O-class failures (exit code 3 territory) as opposed to domain refusals.
    pub fn is_io(&self) -> bool {
        matches!(self, StoreError::Io(_) | StoreError::Journal(_) | StoreError::Locked(_))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum StoreEvent {
    ObjectStored(BlobRef),
    EntryStaged(MetadataEntry),
    EntryPromoted {
        entry_id: String,
    },
    CodeValidated(CodeValidationRecord),
    RunRecorded(Box<RunRecord>),
    DatasetPublished {
        manifest: OutboundManifest,
        source_entries: Vec<String>,
    },
}

#[derive(Default, Serialize)]
struct State {
    objects: BTreeMap<String, BlobRef>,
    entries: BTreeMap<String, MetadataEntry>,
    #[serde(skip)]
    idempotency: HashMap<String, String>,
    validations: Vec<CodeValidationRecord>,
    runs: BTreeMap<String, RunRecord>,
    /// keyed by (environment, dataset_id)
    manifests: BTreeMap<String, BTreeMap<String, OutboundManifest>>,
}

impl State {
    fn apply(&mut self, event: StoreEvent) -> Result<(), String> {
        match event {
            StoreEvent::ObjectStored(blob) => {
                self.objects.entry(blob.checksum.clone()).or_insert(blob);
            }
            StoreEvent::EntryStaged(entry) => {
                if entry.lifecycle != Lifecycle::Staging {
                    return Err(format!("entry {} staged outside staging", entry.entry_id));
                }
                let key = entry.idempotency_key().digest();
                if self.entries.contains_key(&entry.entry_id) || self.idempotency.contains_key(&key) {
                    return Err(format!("entry {} staged twice", entry.entry_id));
                }
                self.idempotency.insert(key, entry.entry_id.clone());
                self.entries.insert(entry.entry_id.clone(), entry);
            }
            StoreEvent::EntryPromoted { entry_id } => {
                let entry = self
                    .entries
                    .get_mut(&entry_id)
                    .ok_or_else(|| format!("promotion of unknown entry {entry_id}"))?;
                if entry.lifecycle != Lifecycle::Staging || entry.validation.outcome != Outcome::Valid {
                    return Err(format!("illegal promotion of {entry_id}"));
                }
                entry.lifecycle = Lifecycle::Production;
            }
            StoreEvent::CodeValidated(record) => self.validations.push(record),
            StoreEvent::RunRecorded(run) => {
                self.runs.insert(run.run_id.clone(), *run);
            }
            StoreEvent::DatasetPublished {
                manifest,
                source_entries,
            } => {
                for id in &source_entries {
                    if let Some(entry) = self.entries.get_mut(id) {
                        entry.outbound_envs.insert(manifest.environment.clone());
                    }
                }
                self.manifests
                    .entry(manifest.environment.clone())
                    .or_default()
                    .insert(manifest.dataset_id.clone(), manifest);
            }
        }
        Ok(())
    }

    fn validation_for(&self, run_id: &str, schema: &SchemaRef, digest: &str) -> Option<&CodeValidationRecord> {
        self.validations
            .iter()
            .rev()
            .find(|v| v.run_id == run_id && &v.code_schema_ref == schema && v.rows_digest == digest)
    }
}

/// Options for [`Datastore::open`].
#[derive(Debug, Clone, Copy, Default)]
pub struct StoreOptions {
    pub durability: Durability,
}

pub struct Datastore {
    root: PathBuf,
    state: RwLock<State>,
    journal: Mutex<Journal<StoreEvent>>,
    _lock: File,
}

impl Datastore {
    pub fn open(root: &Path, options: StoreOptions) -> Result<Self, StoreError> {
        fs::create_dir_all(root.join("index"))?;
        fs::create_dir_all(root.join("blobs"))?;
        fs::create_dir_all(root.join("outbound"))?;
        let lock = File::create(root.join("index").join("LOCK"))?;
        if lock.try_lock().is_err() {
            return Err(StoreError::Locked(root.to_path_buf()));
        }
        let (journal, events) = Journal::open(&root.join("index").join("journal.log"), options.durability)?;
        let mut state = State::default();
        for (i, event) in events.into_iter().enumerate() {
            state.apply(event).map_err(|message| {
                StoreError::Journal(JournalError::Corrupt {
                    path: journal.path().to_path_buf(),
                    line: i + 1,
                    message,
                })
            })?;
        }
        Ok(Datastore {
            root: root.to_path_buf(),
            state: RwLock::new(state),
            journal: Mutex::new(journal),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, checksum: &str) -> PathBuf {
        self.root.join("blobs").join(&checksum[..2]).join(checksum)
    }

    fn outbound_dir(&self, environment: &str, dataset_id: &str) -> PathBuf {
        self.root.join("outbound").join(environment).join(dataset_id)
    }

    /// Appends `event` and applies it, holding the writer lock throughout.
    fn commit(&self, event: StoreEvent) -> Result<(), StoreError> {
        let mut journal = self.journal.lock().unwrap();
        self.commit_locked(&mut journal, event)
    }

    fn commit_locked(&self, journal: &mut Journal<StoreEvent>, event: StoreEvent) -> Result<(), StoreError> {
        journal.append(&event)?;
        self.state.write().unwrap().apply(event).map_err(StoreError::Constraint)
    }

    /// Stores `content` under its SHA-256. Identical content is stored once;
    /// later puts return the first `BlobRef`.
    pub fn put_object(&self, content: &[u8], content_type: &str, hint: &KeyHint) -> Result<BlobRef, StoreError> {
        if content.is_empty() {
            return Err(StoreError::EmptyContent);
        }
        let checksum = sha256_hex(content);
        if let Some(existing) = self.state.read().unwrap().objects.get(&checksum) {
            return Ok(existing.clone());
        }
        let path = self.blob_path(&checksum);
        // Same content always lands at the same path, so concurrent writers
        // race harmlessly; the journal decides which BlobRef is recorded.
        let intact = fs::read(&path).map(|b| sha256_hex(&b) == checksum).unwrap_or(false);
        if !intact {
            write_atomic(&path, content)?;
        }
        let blob = BlobRef {
            object_key: hint.object_key(&checksum, extension_for(content_type)),
            size_bytes: content.len() as u64,
            checksum: checksum.clone(),
            content_type: content_type.to_string(),
        };
        let mut journal = self.journal.lock().unwrap();
        if let Some(existing) = self.state.read().unwrap().objects.get(&checksum) {
            return Ok(existing.clone());
        }
        self.commit_locked(&mut journal, StoreEvent::ObjectStored(blob.clone()))?;
        Ok(blob)
    }

    /// Reads an object and verifies its checksum.
    pub fn read_object(&self, checksum: &str) -> Result<Vec<u8>, StoreError> {
        if !self.state.read().unwrap().objects.contains_key(checksum) {
            return Err(StoreError::NotFound(format!("object {checksum}")));
        }
        let bytes = fs::read(self.blob_path(checksum))?;
        let actual = sha256_hex(&bytes);
        if actual != checksum {
            return Err(StoreError::ChecksumMismatch {
                checksum: checksum.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn object_count(&self) -> usize {
        self.state.read().unwrap().objects.len()
    }

    /// Persists a new metadata entry in staging. A resubmitted idempotency key
    /// returns the original entry id with `created = false`.
    pub fn put_metadata(&self, entry: NewEntry) -> Result<PutOutcome, StoreError> {
        for (what, value) in [
            ("study_id", &entry.study_id),
            ("participant_id", &entry.participant_id),
            ("device_id", &entry.device_id),
            ("task_id", &entry.task_id),
        ] {
            if !is_identifier(value) {
                return Err(StoreError::Constraint(format!(
                    "{what} `{value}` is not a valid identifier"
                )));
            }
        }
        if (entry.validation.outcome == Outcome::Valid) != entry.validation.violations.is_empty() {
            return Err(StoreError::Constraint(
                "validation outcome disagrees with its violations".into(),
            ));
        }
        let key = entry.idempotency_key();
        let mut journal = self.journal.lock().unwrap();
        {
            let state = self.state.read().unwrap();
            if let Some(existing) = state.idempotency.get(&key.digest()) {
                return Ok(PutOutcome {
                    entry_id: existing.clone(),
                    created: false,
                });
            }
            if let Some(blob) = &entry.blob {
                match state.objects.get(&blob.checksum) {
                    Some(stored) if stored == blob => {}
                    _ => return Err(StoreError::DanglingBlob(blob.checksum.clone())),
                }
            }
        }
        let entry_id = key.entry_id();
        let full = MetadataEntry {
            entry_id: entry_id.clone(),
            study_id: entry.study_id,
            participant_id: entry.participant_id,
            device_id: entry.device_id,
            task_id: entry.task_id,
            schema_ref: entry.schema_ref,
            capture_time: entry.capture_time,
            ingest_time: entry.ingest_time,
            blob: entry.blob,
            inline_fields: entry.inline_fields,
            lifecycle: Lifecycle::Staging,
            outbound_envs: Default::default(),
            validation: entry.validation,
        };
        self.commit_locked(&mut journal, StoreEvent::EntryStaged(full))?;
        Ok(PutOutcome {
            entry_id,
            created: true,
        })
    }

    /// Moves valid staged entries to production, one atomic transition each.
    pub fn promote(&self, entry_ids: &[String]) -> Result<PromotionReport, StoreError> {
        let mut report = PromotionReport::default();
        let mut journal = self.journal.lock().unwrap();
        for id in entry_ids {
            let reason = {
                let state = self.state.read().unwrap();
                match state.entries.get(id) {
                    None => Some(SkipReason::NotFound),
                    Some(e) if e.lifecycle == Lifecycle::Production => Some(SkipReason::AlreadyProduction),
                    Some(e) if e.validation.outcome != Outcome::Valid => Some(SkipReason::NotValid),
                    Some(_) => None,
                }
            };
            match reason {
                Some(reason) => report.skipped.push(Skipped {
                    entry_id: id.clone(),
                    reason,
                }),
                None => {
                    self.commit_locked(&mut journal, StoreEvent::EntryPromoted { entry_id: id.clone() })?;
                    report.promoted.push(id.clone());
                }
            }
        }
        Ok(report)
    }

    /// Entries matching every supplied predicate, ordered by `(capture_time, entry_id)`.
    pub fn query_metadata(&self, filter: &MetadataFilter) -> Vec<MetadataEntry> {
        let state = self.state.read().unwrap();
        let mut out: Vec<MetadataEntry> = state.entries.values().filter(|e| filter.matches(e)).cloned().collect();
        out.sort_by(|a, b| (a.capture_time, &a.entry_id).cmp(&(b.capture_time, &b.entry_id)));
        out
    }

    /// The entry and, when a blob is linked, its verified bytes.
    pub fn get_entry(&self, entry_id: &str) -> Result<(MetadataEntry, Option<Vec<u8>>), StoreError> {
        let entry = self
            .state
            .read()
            .unwrap()
            .entries
            .get(entry_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("entry {entry_id}")))?;
        let content = match &entry.blob {
            Some(blob) => Some(self.read_object(&blob.checksum)?),
            None => None,
        };
        Ok((entry, content))
    }

    pub fn entry_count(&self) -> usize {
        self.state.read().unwrap().entries.len()
    }

    /// Records the outcome of CODE validation for a run's output rows.
    pub fn record_code_validation(&self, record: CodeValidationRecord) -> Result<(), StoreError> {
        self.commit(StoreEvent::CodeValidated(record))
    }

    pub fn record_run(&self, run: RunRecord) -> Result<(), StoreError> {
        self.commit(StoreEvent::RunRecorded(Box::new(run)))
    }

    pub fn run(&self, run_id: &str) -> Option<RunRecord> {
        self.state.read().unwrap().runs.get(run_id).cloned()
    }

    pub fn runs(&self) -> Vec<RunRecord> {
        self.state.read().unwrap().runs.values().cloned().collect()
    }

    pub fn run_count(&self) -> usize {
        self.state.read().unwrap().runs.len()
    }

    /// Writes a CODE-validated table and its discovery sidecar to the
    /// environment's outbound zone. Identical republication is a no-op.
    pub fn publish_outbound(&self, request: &PublishRequest<'_>) -> Result<OutboundManifest, StoreError> {
        for (what, value) in [
            ("environment", request.environment),
            ("dataset_id", request.dataset_id),
            ("study_id", request.study_id),
        ] {
            if !is_identifier(value) {
                return Err(StoreError::Constraint(format!(
                    "{what} `{value}` is not a valid identifier"
                )));
            }
        }
        let data = request.rows.to_csv();
        let digest = sha256_hex(&data);
        {
            let state = self.state.read().unwrap();
            match state.validation_for(request.run_id, request.code_schema_ref, &digest) {
                Some(v) if v.report.is_valid() => {}
                _ => {
                    return Err(StoreError::CodeNotValidated {
                        run_id: request.run_id.to_string(),
                        schema: request.code_schema_ref.clone(),
                    })
                }
            }
        }
        let mut journal = self.journal.lock().unwrap();
        if let Some(existing) = self.manifest(request.environment, request.dataset_id) {
            return if existing.data_checksum == digest {
                Ok(existing)
            } else {
                Err(StoreError::DatasetConflict {
                    environment: request.environment.to_string(),
                    dataset_id: request.dataset_id.to_string(),
                })
            };
        }
        let dir = self.outbound_dir(request.environment, request.dataset_id);
        // Files first; the journal line below is the visibility flip.
        write_atomic(&dir.join("data.csv"), &data)?;
        write_atomic(&dir.join("meta.json"), request.sidecar)?;
        let prefix = format!("outbound/{}/{}", request.environment, request.dataset_id);
        let manifest = OutboundManifest {
            environment: request.environment.to_string(),
            dataset_id: request.dataset_id.to_string(),
            study_id: request.study_id.to_string(),
            code_schema_ref: request.code_schema_ref.clone(),
            entries: vec![format!("{prefix}/data.csv"), format!("{prefix}/meta.json")],
            generated_at: request.generated_at,
            row_count: request.rows.len() as u64,
            run_id: request.run_id.to_string(),
            data_checksum: digest,
            sidecar_checksum: sha256_hex(request.sidecar),
        };
        let mut source_entries = request.source_entries.to_vec();
        source_entries.sort();
        source_entries.dedup();
        self.commit_locked(
            &mut journal,
            StoreEvent::DatasetPublished {
                manifest: manifest.clone(),
                source_entries,
            },
        )?;
        Ok(manifest)
    }

    pub fn manifest(&self, environment: &str, dataset_id: &str) -> Option<OutboundManifest> {
        self.state
            .read()
            .unwrap()
            .manifests
            .get(environment)
            .and_then(|m| m.get(dataset_id))
            .cloned()
    }

    /// All committed manifests ordered by (environment, dataset_id).
    pub fn manifests(&self) -> Vec<OutboundManifest> {
        self.state
            .read()
            .unwrap()
            .manifests
            .values()
            .flat_map(|m| m.values().cloned())
            .collect()
    }

    /// Reads a published dataset and its sidecar, verifying both checksums.
    pub fn read_outbound(&self, manifest: &OutboundManifest) -> Result<(Vec<u8>, Vec<u8>), StoreError> {
        let dir = self.outbound_dir(&manifest.environment, &manifest.dataset_id);
        let data = fs::read(dir.join("data.csv"))?;
        let meta = fs::read(dir.join("meta.json"))?;
        for (bytes, expected) in [(&data, &manifest.data_checksum), (&meta, &manifest.sidecar_checksum)] {
            let actual = sha256_hex(bytes);
            if &actual != expected {
                return Err(StoreError::ChecksumMismatch {
                    checksum: expected.clone(),
                    actual,
                });
            }
        }
        Ok((data, meta))
    }

    /// Whether the given rows have a valid CODE validation record for the run.
    pub fn is_code_validated(&self, run_id: &str, schema: &SchemaRef, rows: &Table) -> bool {
        let digest = sha256_hex(&rows.to_csv());
        self.state
            .read()
            .unwrap()
            .validation_for(run_id, schema, &digest)
            .is_some_and(|v| v.report.is_valid())
    }

    /// Hash over the full committed state (objects, entries, validations,
    /// runs, manifests). Equal hashes mean no observable state change.
    pub fn state_hash(&self) -> String {
        canonical_json_hash(&*self.state.read().unwrap())
    }

    pub fn code_validations(&self) -> Vec<CodeValidationRecord> {
        self.state.read().unwrap().validations.clone()
    }
}

/// Input to [`Datastore::publish_outbound`].
pub struct PublishRequest<'a> {
    pub dataset_id: &'a str,
    pub environment: &'a str,
    pub study_id: &'a str,
    pub code_schema_ref: &'a SchemaRef,
    pub rows: &'a Table,
    pub run_id: &'a str,
    pub sidecar: &'a [u8],
    pub generated_at: Timestamp,
    pub source_entries: &'a [String],
}

/// Record of one CODE validation of a run's output rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeValidationRecord {
    pub run_id: String,
    pub code_schema_ref: SchemaRef,
    /// SHA-256 of the rows' canonical CSV encoding.
    pub rows_digest: String,
    pub report: ValidationReport,
}

impl CodeValidationRecord {
    pub fn new(run_id: &str, code_schema_ref: &SchemaRef, rows: &Table, report: ValidationReport) -> Self {
        CodeValidationRecord {
            run_id: run_id.to_string(),
            code_schema_ref: code_schema_ref.clone(),
            rows_digest: sha256_hex(&rows.to_csv()),
            report,
        }
    }
}

fn extension_for(content_type: &str) -> &'static str {
    match content_type.split(';').next().unwrap_or("").trim() {
        "application/json" => "json",
        "text/csv" => "csv",
        "text/plain" => "txt",
        "audio/wav" | "audio/x-wav" => "wav",
        "audio/mpeg" => "mp3",
        "video/mp4" => "mp4",
        "image/png" => "png",
        "image/jpeg" => "jpg",
        _ => "bin",
    }
}
