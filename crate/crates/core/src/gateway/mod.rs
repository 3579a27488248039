//! Record ingestion: envelope checks, CIDE validation and persistence of
//! every submitted record, one at a time or as a batch.

mod batch;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use batch::{
    parse_batch_manifest, ArchiveSource, BatchEntry, BatchReport, BatchSource, BatchTotals, DirectorySource,
    RecordOutcome, RecordStatus,
};

use crate::digest::{is_sha256_hex, sha256_hex};
use crate::fabric::Fabric;
use crate::model::ident::is_identifier;
use crate::model::{validate_record, ValidationReport};
use crate::store::{KeyHint, NewEntry, StoreError};
use crate::time::{Clock, Timestamp};

/// Blob content carried inline in a real-time submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineBlob {
    pub content_base64: String,
    pub content_type: String,
}

/// A record as sent by a device or client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub study_id: String,
    pub participant_id: String,
    pub device_id: String,
    pub task_id: String,
    pub capture_time: String,
    pub payload: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<InlineBlob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_checksum: Option<String>,
}

impl Record {
    pub fn from_json(bytes: &[u8]) -> Result<Record, GatewayError> {
        serde_json::from_slice(bytes).map_err(|e| GatewayError::MalformedEnvelope(e.to_string()))
    }

    /// Checks the envelope and returns the parsed capture time.
    pub fn check_envelope(&self) -> Result<Timestamp, GatewayError> {
        for (name, value) in [
            ("study_id", &self.study_id),
            ("participant_id", &self.participant_id),
            ("device_id", &self.device_id),
            ("task_id", &self.task_id),
        ] {
            if value.is_empty() {
                return Err(GatewayError::MalformedEnvelope(format!("{name} is empty")));
            }
            if !is_identifier(value) {
                return Err(GatewayError::MalformedEnvelope(format!(
                    "{name} `{value}` is not a valid identifier"
                )));
            }
        }
        Timestamp::parse(&self.capture_time).map_err(|e| GatewayError::MalformedEnvelope(format!("capture_time: {e}")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("MALFORMED_ENVELOPE: {0}")]
    MalformedEnvelope(String),
    #[error("SCHEMA_NOT_FOUND: no published CIDE schema for task `{0}`")]
    SchemaNotFound(String),
    #[error("CHECKSUM_MISMATCH: client checksum {claimed} but blob hashes to {actual}")]
    ChecksumMismatch { claimed: String, actual: String },
    #[error("MALFORMED_MANIFEST: {0}")]
    MalformedManifest(String),
    #[error("MISSING_FILE: `{0}` is not part of the batch")]
    MissingFile(String),
    #[error("STORAGE_IO: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::MalformedEnvelope(_) => "MALFORMED_ENVELOPE",
            GatewayError::SchemaNotFound(_) => "SCHEMA_NOT_FOUND",
            GatewayError::ChecksumMismatch { .. } => "CHECKSUM_MISMATCH",
            GatewayError::MalformedManifest(_) => "MALFORMED_MANIFEST",
            GatewayError::MissingFile(_) => "MISSING_FILE",
            GatewayError::Io(_) => "STORAGE_IO",
            GatewayError::Store(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum SubmitOutcome {
    Accepted {
        entry_id: String,
    },
    /// The record was already stored; `entry_id` is the original entry.
    Duplicate {
        entry_id: String,
    },
    /// Stored in staging as an invalid entry for the audit trail.
    Rejected {
        entry_id: String,
        report: ValidationReport,
    },
}

/// Ingestion front door over an opened fabric.
pub struct Gateway<'a> {
    fabric: &'a Fabric,
    clock: &'a dyn Clock,
}

impl<'a> Gateway<'a> {
    pub fn new(fabric: &'a Fabric, clock: &'a dyn Clock) -> Self {
        Gateway { fabric, clock }
    }

    /// Validates and stores one record with optional raw blob content.
    /// Blob content is stored before the metadata entry that links it.
    pub fn submit(&self, record: &Record, blob: Option<(&[u8], &str)>) -> Result<SubmitOutcome, GatewayError> {
        let capture_time = record.check_envelope()?;
        let schema = self
            .fabric
            .schemas
            .cide_for_task(&record.task_id)
            .ok_or_else(|| GatewayError::SchemaNotFound(record.task_id.clone()))?;
        if let Some(claimed) = &record.client_checksum {
            let actual = blob.map(|(b, _)| sha256_hex(b)).unwrap_or_default();
            if !is_sha256_hex(claimed) || *claimed != actual {
                return Err(GatewayError::ChecksumMismatch {
                    claimed: claimed.clone(),
                    actual,
                });
            }
        }
        let report = validate_record(&record.participant_id, &record.payload, &schema);
        let blob_ref = match blob {
            Some((content, content_type)) => Some(self.fabric.store.put_object(
                content,
                content_type,
                &KeyHint::Study {
                    study_id: record.study_id.clone(),
                    participant_id: record.participant_id.clone(),
                    task_id: record.task_id.clone(),
                    date: capture_time.date(),
                },
            )?),
            None => None,
        };
        let valid = report.is_valid();
        let put = self.fabric.store.put_metadata(NewEntry {
            study_id: record.study_id.clone(),
            participant_id: record.participant_id.clone(),
            device_id: record.device_id.clone(),
            task_id: record.task_id.clone(),
            schema_ref: schema.schema_ref(),
            capture_time,
            ingest_time: self.clock.now(),
            blob: blob_ref,
            inline_fields: record.payload.clone(),
            validation: report.clone(),
        })?;
        Ok(match (put.created, valid) {
            (false, _) => SubmitOutcome::Duplicate { entry_id: put.entry_id },
            (true, true) => SubmitOutcome::Accepted { entry_id: put.entry_id },
            (true, false) => SubmitOutcome::Rejected {
                entry_id: put.entry_id,
                report,
            },
        })
    }

    /// Real-time submission: the blob, if any, travels base64-encoded inside the record.
    pub fn submit_realtime(&self, record: &Record) -> Result<SubmitOutcome, GatewayError> {
        match &record.blob {
            None => self.submit(record, None),
            Some(inline) => {
                let content = base64::engine::general_purpose::STANDARD
                    .decode(&inline.content_base64)
                    .map_err(|e| GatewayError::MalformedEnvelope(format!("blob.content_base64: {e}")))?;
                self.submit(record, Some((&content, &inline.content_type)))
            }
        }
    }
}

pub fn encode_blob(content: &[u8], content_type: &str) -> InlineBlob {
    InlineBlob {
        content_base64: base64::engine::general_purpose::STANDARD.encode(content),
        content_type: content_type.to_string(),
    }
}

#[cfg(test)]
mod tests;
