use std::collections::BTreeSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::digest::{canonical_json_hash, sha256_hex};
use crate::model::{SchemaRef, ValidationReport};
use crate::time::Timestamp;

/// Reference to an immutable stored object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub object_key: String,
    pub size_bytes: u64,
    /// SHA-256, lowercase hex.
    pub checksum: String,
    pub content_type: String,
}

/// Where an object logically lives; determines its object key.
#[derive(Debug, Clone)]
pub enum KeyHint {
    /// Ingested content: `study/{study}/{participant}/{task}/{yyyy-mm-dd}/{checksum}.{ext}`.
    Study {
        study_id: String,
        participant_id: String,
        task_id: String,
        date: NaiveDate,
    },
    /// Pipeline artifacts: `artifacts/{pipeline}/{instance}/{port}/{checksum}.{ext}`.
    Artifact {
        pipeline_id: String,
        instance: String,
        port: String,
    },
    /// Discovery sidecars: `sidecars/{env}/{dataset}/{checksum}.{ext}`.
    Sidecar { environment: String, dataset_id: String },
}

impl KeyHint {
    pub fn object_key(&self, checksum: &str, ext: &str) -> String {
        match self {
            KeyHint::Study {
                study_id,
                participant_id,
                task_id,
                date,
            } => format!(
                "study/{study_id}/{participant_id}/{task_id}/{}/{checksum}.{ext}",
                date.format("%Y-%m-%d")
            ),
            KeyHint::Artifact {
                pipeline_id,
                instance,
                port,
            } => format!("artifacts/{pipeline_id}/{instance}/{port}/{checksum}.{ext}"),
            KeyHint::Sidecar {
                environment,
                dataset_id,
            } => format!("sidecars/{environment}/{dataset_id}/{checksum}.{ext}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lifecycle {
    Staging,
    Production,
}

impl std::str::FromStr for Lifecycle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "staging" => Ok(Lifecycle::Staging),
            "production" => Ok(Lifecycle::Production),
            other => Err(format!("unknown lifecycle `{other}`")),
        }
    }
}

/// `(participant_id, task_id, capture_time, content hash)`; the content hash
/// is the blob checksum when a blob is attached, else the payload hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdempotencyKey {
    pub participant_id: String,
    pub task_id: String,
    pub capture_time: Timestamp,
    pub content_hash: String,
}

impl IdempotencyKey {
    pub fn new(
        participant_id: &str,
        task_id: &str,
        capture_time: Timestamp,
        blob_checksum: Option<&str>,
        payload: &Map<String, Value>,
    ) -> Self {
        IdempotencyKey {
            participant_id: participant_id.to_string(),
            task_id: task_id.to_string(),
            capture_time,
            content_hash: blob_checksum
                .map(str::to_string)
                .unwrap_or_else(|| canonical_json_hash(payload)),
        }
    }

    pub fn digest(&self) -> String {
        canonical_json_hash(self)
    }

    /// Entry ids derive from the key, so the same record always maps to the same id.
    pub fn entry_id(&self) -> String {
        format!("e{}", &self.digest()[..32])
    }
}

/// A stored metadata record linked to an optional blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataEntry {
    pub entry_id: String,
    pub study_id: String,
    pub participant_id: String,
    pub device_id: String,
    pub task_id: String,
    pub schema_ref: SchemaRef,
    pub capture_time: Timestamp,
    pub ingest_time: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<BlobRef>,
    pub inline_fields: Map<String, Value>,
    pub lifecycle: Lifecycle,
    #[serde(default)]
    pub outbound_envs: BTreeSet<String>,
    pub validation: ValidationReport,
}

impl MetadataEntry {
    pub fn idempotency_key(&self) -> IdempotencyKey {
        IdempotencyKey::new(
            &self.participant_id,
            &self.task_id,
            self.capture_time,
            self.blob.as_ref().map(|b| b.checksum.as_str()),
            &self.inline_fields,
        )
    }
}

/// An entry as submitted; the store assigns id and lifecycle.
#[derive(Debug, Clone)]
pub struct NewEntry {
    pub study_id: String,
    pub participant_id: String,
    pub device_id: String,
    pub task_id: String,
    pub schema_ref: SchemaRef,
    pub capture_time: Timestamp,
    pub ingest_time: Timestamp,
    pub blob: Option<BlobRef>,
    pub inline_fields: Map<String, Value>,
    pub validation: ValidationReport,
}

impl NewEntry {
    pub fn idempotency_key(&self) -> IdempotencyKey {
        IdempotencyKey::new(
            &self.participant_id,
            &self.task_id,
            self.capture_time,
            self.blob.as_ref().map(|b| b.checksum.as_str()),
            &self.inline_fields,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutOutcome {
    pub entry_id: String,
    /// False when the idempotency key was already present.
    pub created: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SkipReason {
    NotFound,
    NotValid,
    AlreadyProduction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub entry_id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotionReport {
    pub promoted: Vec<String>,
    pub skipped: Vec<Skipped>,
}

/// Conjunctive filter; `None` matches everything. Time bounds are inclusive.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetadataFilter {
    pub study_id: Option<String>,
    pub participant_id: Option<String>,
    pub task_id: Option<String>,
    pub lifecycle: Option<Lifecycle>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
}

impl MetadataFilter {
    pub fn matches(&self, e: &MetadataEntry) -> bool {
        self.study_id.as_ref().is_none_or(|s| *s == e.study_id)
            && self.participant_id.as_ref().is_none_or(|p| *p == e.participant_id)
            && self.task_id.as_ref().is_none_or(|t| *t == e.task_id)
            && self.lifecycle.is_none_or(|l| l == e.lifecycle)
            && self.from.is_none_or(|t| e.capture_time >= t)
            && self.to.is_none_or(|t| e.capture_time <= t)
    }
}

/// Committed description of one published outbound dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundManifest {
    pub environment: String,
    pub dataset_id: String,
    pub study_id: String,
    pub code_schema_ref: SchemaRef,
    /// Object keys of the dataset object and its sidecar.
    pub entries: Vec<String>,
    pub generated_at: Timestamp,
    pub row_count: u64,
    pub run_id: String,
    pub data_checksum: String,
    pub sidecar_checksum: String,
}

impl OutboundManifest {
    /// Content identity, independent of when and by which run it was produced.
    pub fn content_id(&self) -> String {
        sha256_hex(format!("{}\n{}", self.data_checksum, self.code_schema_ref).as_bytes())
    }
}
