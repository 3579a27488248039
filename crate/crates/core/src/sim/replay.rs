use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::stream::{manifest_entry, record_bytes};
use super::{SimRecord, SimStream};
use crate::gateway::{
    encode_blob, ArchiveSource, BatchReport, BatchTotals, Gateway, GatewayError, Record, RecordStatus, SubmitOutcome,
};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// One batch upload per participant-day.
    Batch,
    /// One request per record, in capture-time order.
    Realtime,
}

impl FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(ReplayMode::Batch),
            "realtime" => Ok(ReplayMode::Realtime),
            other => Err(format!("unknown replay mode `{other}` (batch|realtime)")),
        }
    }
}

/// Files of one batch upload, keyed by their manifest path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchBundle {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl BatchBundle {
    pub fn to_source(&self) -> ArchiveSource {
        let mut source = ArchiveSource::default();
        for (name, content) in &self.files {
            source.insert(name, content.clone());
        }
        source
    }

    pub fn to_tar(&self) -> Vec<u8> {
        let mut builder = tar::Builder::new(Vec::new());
        for (name, content) in &self.files {
            let mut header = tar::Header::new_gnu();
            header.set_size(content.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder
                .append_data(&mut header, name, content.as_slice())
                .expect("writing to memory");
        }
        builder.into_inner().expect("writing to memory")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EndpointError {
    /// The endpoint could not be reached or answered nonsense.
    #[error("TRANSPORT_ERROR: {0}")]
    Transport(String),
    /// The gateway answered with an error for this submission.
    #[error("{code}: {message}")]
    Refused { code: String, message: String },
}

impl From<GatewayError> for EndpointError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Io(_) => EndpointError::Transport(e.to_string()),
            GatewayError::Store(ref s) if s.is_io() => EndpointError::Transport(e.to_string()),
            other => EndpointError::Refused {
                code: other.code().to_string(),
                message: other.to_string(),
            },
        }
    }
}

/// Where replayed submissions go: an in-process gateway or a remote one.
pub trait IngestEndpoint {
    /// `record` carries its blob inline, if it has one.
    fn submit_record(&self, record: &Record) -> Result<SubmitOutcome, EndpointError>;
    fn submit_batch(&self, bundle: &BatchBundle) -> Result<BatchReport, EndpointError>;
}

pub struct GatewayEndpoint<'a>(pub Gateway<'a>);

impl IngestEndpoint for GatewayEndpoint<'_> {
    fn submit_record(&self, record: &Record) -> Result<SubmitOutcome, EndpointError> {
        Ok(self.0.submit_realtime(record)?)
    }

    fn submit_batch(&self, bundle: &BatchBundle) -> Result<BatchReport, EndpointError> {
        Ok(self.0.submit_batch(&bundle.to_source())?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("TRANSPORT_ERROR: {0}")]
    Transport(String),
}

impl ReplayError {
    pub fn code(&self) -> &'static str {
        "TRANSPORT_ERROR"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    /// Position in the stream.
    pub index: usize,
    #[serde(flatten)]
    pub status: RecordStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub mode: ReplayMode,
    pub requests: u64,
    pub totals: BatchTotals,
    /// Sorted by stream index.
    pub outcomes: Vec<ReplayOutcome>,
}

fn status_of(outcome: SubmitOutcome) -> RecordStatus {
    match outcome {
        SubmitOutcome::Accepted { entry_id } => RecordStatus::Accepted { entry_id },
        SubmitOutcome::Duplicate { entry_id } => RecordStatus::Duplicate { entry_id },
        SubmitOutcome::Rejected { entry_id, report } => RecordStatus::Rejected { entry_id, report },
    }
}

pub fn replay(
    stream: &SimStream,
    mode: ReplayMode,
    endpoint: &dyn IngestEndpoint,
) -> Result<ReplayReport, ReplayError> {
    let mut outcomes = Vec::with_capacity(stream.records.len());
    let mut requests = 0;
    match mode {
        ReplayMode::Realtime => {
            let mut order: Vec<(Option<Timestamp>, usize)> = stream
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| (Timestamp::parse(&r.record.capture_time).ok(), i))
                .collect();
            order.sort();
            for (_, index) in order {
                let sim = &stream.records[index];
                let mut record = sim.record.clone();
                record.blob = sim.blob.as_ref().map(|b| encode_blob(&b.content, &b.content_type));
                requests += 1;
                let status = match endpoint.submit_record(&record) {
                    Ok(outcome) => status_of(outcome),
                    Err(EndpointError::Refused { code, message }) => RecordStatus::Failed { code, message },
                    Err(EndpointError::Transport(m)) => return Err(ReplayError::Transport(m)),
                };
                outcomes.push(ReplayOutcome { index, status });
            }
        }
        ReplayMode::Batch => {
            let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
            for (i, r) in stream.records.iter().enumerate() {
                let day = r.record.capture_time.get(..10).unwrap_or_default().to_string();
                groups
                    .entry((r.record.participant_id.clone(), day))
                    .or_default()
                    .push(i);
            }
            for indices in groups.values() {
                let bundle = bundle(stream, indices);
                requests += 1;
                let report = match endpoint.submit_batch(&bundle) {
                    Ok(report) => report,
                    Err(e) => return Err(ReplayError::Transport(e.to_string())),
                };
                if report.outcomes.len() != indices.len() {
                    return Err(ReplayError::Transport(format!(
                        "batch of {} records answered with {} outcomes",
                        indices.len(),
                        report.outcomes.len()
                    )));
                }
                for o in report.outcomes {
                    let index = *indices
                        .get(o.index)
                        .ok_or_else(|| ReplayError::Transport(format!("outcome index {} out of range", o.index)))?;
                    outcomes.push(ReplayOutcome {
                        index,
                        status: o.status,
                    });
                }
            }
        }
    }
    outcomes.sort_by_key(|o| o.index);
    let mut totals = BatchTotals::default();
    for o in &outcomes {
        totals.received += 1;
        match o.status {
            RecordStatus::Accepted { .. } => totals.accepted += 1,
            RecordStatus::Duplicate { .. } => totals.duplicate += 1,
            RecordStatus::Rejected { .. } | RecordStatus::Failed { .. } => totals.rejected += 1,
        }
    }
    Ok(ReplayReport {
        mode,
        requests,
        totals,
        outcomes,
    })
}

pub(super) fn bundle(stream: &SimStream, indices: &[usize]) -> BatchBundle {
    let mut files = BTreeMap::new();
    let mut entries = Vec::with_capacity(indices.len());
    for &i in indices {
        let r: &SimRecord = &stream.records[i];
        let entry = manifest_entry(i, r);
        files.insert(entry.record_file.clone(), record_bytes(&r.record));
        if let (Some(name), Some(blob)) = (&entry.blob_file, &r.blob) {
            files.insert(name.clone(), blob.content.clone());
        }
        entries.push(entry);
    }
    files.insert(
        "batch.json".into(),
        serde_json::to_vec(&serde_json::json!({ "entries": entries })).expect("manifest serializes"),
    );
    BatchBundle { files }
}
