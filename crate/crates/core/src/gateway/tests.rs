use std::sync::Arc;

use serde_json::json;

use super::*;
use crate::journal::Durability;
use crate::model::ViolationCode;
use crate::store::{Lifecycle, MetadataFilter};
use crate::study;
use crate::time::SteppingClock;

fn fabric(dir: &std::path::Path) -> Fabric {
    let fabric = Fabric::open(dir, Durability::Buffered).unwrap();
    study::install(&fabric, "operator", Timestamp::parse("2024-01-01T00:00:00Z").unwrap()).unwrap();
    fabric
}

fn clock() -> SteppingClock {
    SteppingClock::starting_at(Timestamp::parse("2024-03-10T00:00:00Z").unwrap())
}

fn heart_rate(hr: f64, minute: u32) -> Record {
    Record {
        study_id: "s1".into(),
        participant_id: "pt-0001".into(),
        device_id: "bed-01".into(),
        task_id: study::BED_SENSOR.into(),
        capture_time: format!("2024-03-01T02:{minute:02}:00Z"),
        payload: json!({"heart_rate": hr, "respiration_rate": 14.0})
            .as_object()
            .unwrap()
            .clone(),
        blob: None,
        client_checksum: None,
    }
}

#[test]
fn valid_record_is_accepted_into_staging() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let gw = Gateway::new(&fabric, &clock);
    let SubmitOutcome::Accepted { entry_id } = gw.submit_realtime(&heart_rate(72.0, 0)).unwrap() else {
        panic!("not accepted");
    };
    let (entry, _) = fabric.store.get_entry(&entry_id).unwrap();
    assert_eq!(entry.lifecycle, Lifecycle::Staging);
    assert!(entry.validation.is_valid());
}

#[test]
fn range_violation_is_rejected_and_kept_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let gw = Gateway::new(&fabric, &clock);
    let SubmitOutcome::Rejected { entry_id, report } = gw.submit_realtime(&heart_rate(400.0, 0)).unwrap() else {
        panic!("not rejected");
    };
    assert!(report.has("heart_rate", ViolationCode::RangeViolation));
    assert!(!fabric.store.get_entry(&entry_id).unwrap().0.validation.is_valid());
    assert!(fabric
        .store
        .query_metadata(&MetadataFilter::default())
        .iter()
        .all(|e| !e.validation.is_valid()));
}

#[test]
fn resubmission_is_duplicate_with_original_id() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let gw = Gateway::new(&fabric, &clock);
    let first = gw.submit_realtime(&heart_rate(72.0, 0)).unwrap();
    let hash = fabric.store.state_hash();
    let second = gw.submit_realtime(&heart_rate(72.0, 0)).unwrap();
    let (SubmitOutcome::Accepted { entry_id: a }, SubmitOutcome::Duplicate { entry_id: b }) = (first, second) else {
        panic!("unexpected outcomes");
    };
    assert_eq!(a, b);
    assert_eq!(fabric.store.state_hash(), hash);
}

#[test]
fn envelope_schema_and_checksum_errors() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let gw = Gateway::new(&fabric, &clock);

    let mut r = heart_rate(72.0, 0);
    r.participant_id.clear();
    assert_eq!(gw.submit_realtime(&r).unwrap_err().code(), "MALFORMED_ENVELOPE");
    let mut r = heart_rate(72.0, 0);
    r.capture_time = "2024-03-01T02:00:00+01:00".into();
    assert_eq!(gw.submit_realtime(&r).unwrap_err().code(), "MALFORMED_ENVELOPE");
    let mut r = heart_rate(72.0, 0);
    r.task_id = "nope".into();
    assert_eq!(gw.submit_realtime(&r).unwrap_err().code(), "SCHEMA_NOT_FOUND");

    let mut r = heart_rate(72.0, 0);
    r.blob = Some(encode_blob(b"raw", "text/plain"));
    r.client_checksum = Some(crate::digest::sha256_hex(b"other"));
    assert_eq!(gw.submit_realtime(&r).unwrap_err().code(), "CHECKSUM_MISMATCH");
    r.client_checksum = Some(crate::digest::sha256_hex(b"raw"));
    assert!(matches!(
        gw.submit_realtime(&r).unwrap(),
        SubmitOutcome::Accepted { .. }
    ));
    assert_eq!(fabric.store.entry_count(), 1);

    assert_eq!(
        Record::from_json(b"{\"study_id\": 1}").unwrap_err().code(),
        "MALFORMED_ENVELOPE"
    );
}

fn batch_of(records: &[Record]) -> ArchiveSource {
    let mut source = ArchiveSource::default();
    let mut entries = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let name = format!("records/r{i:05}.json");
        source.insert(&name, serde_json::to_vec(r).unwrap());
        entries.push(json!({"record_file": name}));
    }
    source.insert(
        "batch.json",
        serde_json::to_vec(&json!({ "entries": entries })).unwrap(),
    );
    source
}

#[test]
fn batch_counts_and_resubmission() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let gw = Gateway::new(&fabric, &clock);
    let invalid: Vec<usize> = (0..100).filter(|i| i % 10 == 3).collect();
    let records: Vec<Record> = (0..100)
        .map(|i| {
            let hr = if invalid.contains(&i) {
                999.0
            } else {
                60.0 + i as f64 / 10.0
            };
            let mut r = heart_rate(hr, 0);
            r.capture_time = format!("2024-03-01T{:02}:{:02}:00Z", i / 60, i % 60);
            r
        })
        .collect();
    let source = batch_of(&records);
    let report = gw.submit_batch(&source).unwrap();
    assert_eq!(
        report.totals,
        BatchTotals {
            received: 100,
            accepted: 90,
            rejected: 10,
            duplicate: 0
        }
    );
    let rejected: Vec<usize> = report
        .outcomes
        .iter()
        .filter(|o| matches!(o.status, RecordStatus::Rejected { .. }))
        .map(|o| o.index)
        .collect();
    assert_eq!(rejected, invalid);

    let again = gw.submit_batch(&source).unwrap();
    assert_eq!(again.totals.accepted, 0);
    assert_eq!(again.totals.duplicate, 100);
    assert_eq!(again.batch_id, report.batch_id);
}

#[test]
fn empty_batch_and_manifest_problems() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let gw = Gateway::new(&fabric, &clock);
    let report = gw.submit_batch(&batch_of(&[])).unwrap();
    assert_eq!(report.totals, BatchTotals::default());

    let mut source = ArchiveSource::default();
    source.insert(
        "batch.json",
        b"[{\"record_file\": \"../etc/passwd\"}, {\"record_file\": \"gone.json\"}]".to_vec(),
    );
    let report = gw.submit_batch(&source).unwrap();
    assert_eq!(report.totals.rejected, 2);
    assert!(report
        .outcomes
        .iter()
        .all(|o| matches!(&o.status, RecordStatus::Failed { code, .. } if code == "MISSING_FILE")));

    let mut source = ArchiveSource::default();
    source.insert("batch.json", b"{\"entries\": 3}".to_vec());
    assert_eq!(gw.submit_batch(&source).unwrap_err().code(), "MALFORMED_MANIFEST");
    assert_eq!(
        gw.submit_batch(&ArchiveSource::default()).unwrap_err().code(),
        "MALFORMED_MANIFEST"
    );
}

#[test]
fn batch_blobs_and_tar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let gw = Gateway::new(&fabric, &clock);
    let content = b"the quick brown fox";
    let record = Record {
        study_id: "s1".into(),
        participant_id: "pt-0002".into(),
        device_id: "tab-01".into(),
        task_id: study::COGNITIVE_TASK.into(),
        capture_time: "2024-03-01T09:00:00Z".into(),
        payload: json!({"score": 80, "reaction_ms": 640, "transcript": crate::digest::sha256_hex(content)})
            .as_object()
            .unwrap()
            .clone(),
        blob: None,
        client_checksum: Some(crate::digest::sha256_hex(content)),
    };
    let mut builder = tar::Builder::new(Vec::new());
    let mut add = |name: &str, bytes: &[u8]| {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder.append_data(&mut header, name, bytes).unwrap();
    };
    add(
        "batch.json",
        br#"{"entries":[{"record_file":"r0.json","blob_file":"b0.txt","content_type":"text/plain"}]}"#,
    );
    add("r0.json", &serde_json::to_vec(&record).unwrap());
    add("b0.txt", content);
    let bytes = builder.into_inner().unwrap();
    let report = gw.submit_batch(&ArchiveSource::from_tar(&bytes).unwrap()).unwrap();
    let RecordStatus::Accepted { entry_id } = &report.outcomes[0].status else {
        panic!("{:?}", report.outcomes[0]);
    };
    let (entry, blob) = fabric.store.get_entry(entry_id).unwrap();
    assert_eq!(blob.unwrap(), content);
    assert!(entry
        .blob
        .unwrap()
        .object_key
        .starts_with("study/s1/pt-0002/cognitive_task/2024-03-01/"));
}

#[test]
fn concurrent_disjoint_submitters_lose_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = Arc::new(fabric(dir.path()));
    let clock = Arc::new(clock());
    let handles: Vec<_> = (0..6)
        .map(|t| {
            let fabric = Arc::clone(&fabric);
            let clock = Arc::clone(&clock);
            std::thread::spawn(move || {
                let gw = Gateway::new(&fabric, &*clock);
                (0..20)
                    .filter(|i| {
                        let mut r = heart_rate(70.0, *i);
                        r.device_id = format!("bed-{t}");
                        r.participant_id = format!("pt-{t:04}");
                        matches!(gw.submit_realtime(&r).unwrap(), SubmitOutcome::Accepted { .. })
                    })
                    .count()
            })
        })
        .collect();
    let accepted: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(accepted, 120);
    assert_eq!(fabric.store.entry_count(), 120);
}
