//! On-disk stream layout: `records/rNNNNN.json`, `blobs/bNNNNN.txt`,
//! a `batch.json` manifest covering every record, and `ledger.json`.

use std::fs;
use std::io;
use std::path::Path;

use super::{GroundTruthLedger, SimBlob, SimRecord, SimStream};
use crate::gateway::{parse_batch_manifest, BatchEntry, BatchSource, DirectorySource, Record};

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("STORAGE_IO: {0}")]
    Io(#[from] io::Error),
    #[error("MALFORMED_STREAM: {0}")]
    Malformed(String),
}

impl StreamError {
    pub fn code(&self) -> &'static str {
        match self {
            StreamError::Io(_) => "STORAGE_IO",
            StreamError::Malformed(_) => "MALFORMED_STREAM",
        }
    }
}

pub(super) fn manifest_entry(index: usize, record: &SimRecord) -> BatchEntry {
    BatchEntry {
        record_file: SimRecord::record_file(index),
        blob_file: record.blob.as_ref().map(|_| SimRecord::blob_file(index)),
        content_type: record.blob.as_ref().map(|b| b.content_type.clone()),
    }
}

pub(super) fn record_bytes(record: &Record) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(record).expect("record serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes the stream into `dir`, which must be empty or absent.
pub fn write_stream(dir: &Path, stream: &SimStream, ledger: &GroundTruthLedger) -> Result<(), StreamError> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(StreamError::Malformed(format!("{} is not empty", dir.display())));
    }
    fs::create_dir_all(dir.join("records"))?;
    fs::create_dir_all(dir.join("blobs"))?;
    let mut entries = Vec::with_capacity(stream.records.len());
    for (index, r) in stream.records.iter().enumerate() {
        fs::write(dir.join(SimRecord::record_file(index)), record_bytes(&r.record))?;
        if let Some(blob) = &r.blob {
            fs::write(dir.join(SimRecord::blob_file(index)), &blob.content)?;
        }
        entries.push(manifest_entry(index, r));
    }
    let mut manifest =
        serde_json::to_vec_pretty(&serde_json::json!({ "entries": entries })).expect("manifest serializes");
    manifest.push(b'\n');
    fs::write(dir.join("batch.json"), manifest)?;
    fs::write(dir.join(LEDGER_FILE), ledger.to_document())?;
    Ok(())
}

/// Reads a stream written by [`write_stream`]. The ledger is optional so
/// that hand-assembled batch directories can be replayed too.
pub fn load_stream(dir: &Path) -> Result<(SimStream, Option<GroundTruthLedger>), StreamError> {
    let source = DirectorySource::new(dir);
    let read = |name: &str| -> Result<Vec<u8>, StreamError> {
        source
            .read(name)?
            .ok_or_else(|| StreamError::Malformed(format!("`{name}` is missing")))
    };
    let entries = parse_batch_manifest(&read("batch.json")?).map_err(StreamError::Malformed)?;
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let record = Record::from_json(&read(&entry.record_file)?)
            .map_err(|e| StreamError::Malformed(format!("{}: {e}", entry.record_file)))?;
        let blob = match &entry.blob_file {
            None => None,
            Some(file) => Some(SimBlob {
                content: read(file)?,
                content_type: entry
                    .content_type
                    .clone()
                    .unwrap_or_else(|| "application/octet-stream".into()),
            }),
        };
        records.push(SimRecord { record, blob });
    }
    let ledger = match source.read(LEDGER_FILE)? {
        None => None,
        Some(bytes) => {
            Some(serde_json::from_slice(&bytes).map_err(|e| StreamError::Malformed(format!("{LEDGER_FILE}: {e}")))?)
        }
    };
    Ok((SimStream { records }, ledger))
}
