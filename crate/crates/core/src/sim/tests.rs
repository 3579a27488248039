use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::fabric::Fabric;
use crate::gateway::{ArchiveSource, BatchSource, Gateway, RecordStatus};
use crate::journal::Durability;
use crate::model::validate_record;
use crate::time::SteppingClock;

fn surveys_only(seed: u64, participants: u32, days: u32, rate: f64) -> SimConfig {
    SimConfig {
        devices: vec![DeviceProfile::SleepSurvey],
        ..SimConfig::new(seed, participants, days, rate)
    }
}

#[test]
fn same_seed_same_bytes() {
    let config = SimConfig::new(42, 3, 7, 0.1);
    let (a, la) = generate(&config).unwrap();
    let (b, lb) = generate(&config).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.to_document(), lb.to_document());
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    write_stream(&d1.path().join("s"), &a, &la).unwrap();
    write_stream(&d2.path().join("s"), &b, &lb).unwrap();
    for name in [
        "batch.json",
        "ledger.json",
        "records/r00000.json",
        "records/r01000.json",
    ] {
        assert_eq!(
            std::fs::read(d1.path().join("s").join(name)).unwrap(),
            std::fs::read(d2.path().join("s").join(name)).unwrap(),
            "{name}"
        );
    }
    let (other, _) = generate(&SimConfig::new(43, 3, 7, 0.1)).unwrap();
    assert_ne!(a, other);
}

#[test]
fn zero_rate_marks_everything_valid() {
    let (stream, ledger) = generate(&SimConfig::new(7, 2, 2, 0.0)).unwrap();
    assert_eq!(ledger.records.len(), stream.records.len());
    assert!(ledger
        .records
        .iter()
        .all(|r| r.expected == Verdict::Valid && r.corruption.is_none()));
}

#[test]
fn corrupted_count_follows_rounding_rule() {
    let (stream, ledger) = generate(&surveys_only(1, 100, 10, 0.1)).unwrap();
    assert_eq!(stream.records.len(), 1000);
    assert_eq!(ledger.corrupted_count(), 100);
    for (rate, n) in [(0.0004, 0), (0.0016, 2), (0.0994, 99), (1.0, 1000)] {
        let (_, ledger) = generate(&surveys_only(1, 100, 10, rate)).unwrap();
        assert_eq!(ledger.corrupted_count(), n, "rate {rate}");
    }
}

#[test]
fn invalid_configs_are_refused() {
    let mut configs = vec![
        SimConfig::new(1, 0, 7, 0.1),
        SimConfig::new(1, 3, 0, 0.1),
        SimConfig::new(1, 3, 7, 1.5),
        SimConfig::new(1, 3, 7, f64::NAN),
        SimConfig {
            corruption_kinds: vec![],
            ..SimConfig::new(1, 3, 7, 0.1)
        },
        SimConfig {
            devices: vec![],
            ..SimConfig::new(1, 3, 7, 0.1)
        },
        SimConfig {
            devices: vec![DeviceProfile::SleepSurvey, DeviceProfile::SleepSurvey],
            ..SimConfig::new(1, 3, 7, 0.1)
        },
    ];
    configs.push(SimConfig {
        devices: vec![DeviceProfile::BedSensor { interval_minutes: 0 }],
        ..SimConfig::new(1, 3, 7, 0.1)
    });
    for c in configs {
        assert_eq!(generate(&c).unwrap_err().code(), "INVALID_CONFIG", "{c:?}");
    }
}

/// Independent recomputation of the per-day aggregates from the stream.
fn recomputed(
    stream: &SimStream,
    ledger: &GroundTruthLedger,
) -> BTreeMap<(String, String, String, String), (u64, f64, f64, f64)> {
    let mut out: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for (r, l) in stream.records.iter().zip(&ledger.records) {
        if l.corruption.is_some() {
            continue;
        }
        for (field, value) in &r.record.payload {
            if let Some(x) = value.as_f64() {
                let key = (
                    r.record.participant_id.clone(),
                    r.record.capture_time[..10].to_string(),
                    r.record.task_id.clone(),
                    field.clone(),
                );
                out.entry(key).or_default().push(x);
            }
        }
    }
    out.into_iter()
        .map(|(k, xs)| {
            let sum: f64 = xs.iter().sum();
            let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (k, (xs.len() as u64, sum, min, max))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ledger_agrees_with_validation_and_recomputation(seed in any::<u64>(), participants in 1u32..4, days in 1u32..4, rate in 0.0f64..=1.0) {
        let (stream, ledger) = generate(&SimConfig::new(seed, participants, days, rate)).unwrap();
        prop_assert_eq!(ledger.records.len(), stream.records.len());
        let schemas: BTreeMap<String, CideSchema> = study::cide_schemas().into_iter().map(|s| (s.task_id.clone(), s)).collect();
        for (r, l) in stream.records.iter().zip(&ledger.records) {
            let report = validate_record(&r.record.participant_id, &r.record.payload, &schemas[&r.record.task_id]);
            prop_assert_eq!(report.is_valid(), l.expected == Verdict::Valid, "record {}", l.index);
            let got: Vec<ExpectedViolation> = report
                .violations
                .iter()
                .map(|v| ExpectedViolation { field: v.field.clone(), code: v.code })
                .collect();
            prop_assert_eq!(&got, &l.expected_violations, "record {}", l.index);
        }
        let want = recomputed(&stream, &ledger);
        prop_assert_eq!(want.len(), ledger.aggregates.len());
        for a in &ledger.aggregates {
            let key = (a.participant_id.clone(), a.day.to_string(), a.task_id.clone(), a.field.clone());
            let (count, sum, min, max) = want[&key];
            prop_assert_eq!(a.count, count);
            prop_assert!((a.sum.as_f64().unwrap() - sum).abs() <= 1e-9 * sum.abs().max(1.0));
            prop_assert_eq!(a.min.as_f64().unwrap(), min);
            prop_assert_eq!(a.max.as_f64().unwrap(), max);
            prop_assert!((a.mean - sum / count as f64).abs() <= 1e-9 * a.mean.abs().max(1.0));
        }
    }
}

#[test]
fn stream_round_trips_through_disk() {
    let (stream, ledger) = generate(&SimConfig::new(5, 2, 2, 0.2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("stream");
    write_stream(&root, &stream, &ledger).unwrap();
    let (loaded, loaded_ledger) = load_stream(&root).unwrap();
    assert_eq!(loaded, stream);
    assert_eq!(loaded_ledger.unwrap(), ledger);
    assert_eq!(
        write_stream(&root, &stream, &ledger).unwrap_err().code(),
        "MALFORMED_STREAM"
    );
}

fn fabric(dir: &std::path::Path) -> Fabric {
    let fabric = Fabric::open(dir, Durability::Buffered).unwrap();
    study::install(&fabric, "operator", Timestamp::parse("2024-01-01T00:00:00Z").unwrap()).unwrap();
    fabric
}

fn clock() -> SteppingClock {
    SteppingClock::starting_at(Timestamp::parse("2024-04-01T00:00:00Z").unwrap())
}

#[test]
fn realtime_replay_of_valid_records_is_all_accepted() {
    let (mut stream, _) = generate(&SimConfig::new(3, 2, 1, 0.0)).unwrap();
    stream.records.truncate(100);
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let endpoint = GatewayEndpoint(Gateway::new(&fabric, &clock));
    let report = replay(&stream, ReplayMode::Realtime, &endpoint).unwrap();
    assert_eq!(report.totals.accepted, 100);
    assert_eq!(report.requests, 100);
}

#[test]
fn batch_replay_matches_ledger_then_duplicates() {
    let (stream, ledger) = generate(&SimConfig::new(11, 2, 2, 0.1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fabric = fabric(dir.path());
    let clock = clock();
    let endpoint = GatewayEndpoint(Gateway::new(&fabric, &clock));
    let report = replay(&stream, ReplayMode::Batch, &endpoint).unwrap();
    assert_eq!(report.totals, ledger.expected_totals());
    assert_eq!(report.requests, 4);
    for (o, l) in report.outcomes.iter().zip(&ledger.records) {
        let rejected = matches!(o.status, RecordStatus::Rejected { .. });
        assert_eq!(rejected, l.expected == Verdict::Invalid, "record {}", l.index);
    }
    let hash = fabric.store.state_hash();
    let again = replay(&stream, ReplayMode::Realtime, &endpoint).unwrap();
    assert_eq!(again.totals.duplicate, stream.records.len() as u64);
    assert_eq!(fabric.store.state_hash(), hash);
}

#[test]
fn bundles_tar_round_trip() {
    let (stream, _) = generate(&SimConfig::new(2, 1, 1, 0.0)).unwrap();
    let indices: Vec<usize> = (0..stream.records.len()).collect();
    let b = replay::bundle(&stream, &indices);
    let source = ArchiveSource::from_tar(&b.to_tar()).unwrap();
    for (name, content) in &b.files {
        assert_eq!(source.read(name).unwrap().as_ref(), Some(content));
    }
}
