use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::{json, Value};

use super::*;
use crate::journal::Durability;
use crate::model::ValidationReport;
use crate::pipeline::{emit_discovery_metadata, RunInfo};
use crate::store::CodeValidationRecord;
use crate::store::{PublishRequest, StoreOptions};
use crate::study;

const KEY: &[u8] = b"access-test-key";

fn ts(s: &str) -> Timestamp {
    Timestamp::parse(s).unwrap()
}

fn open(dir: &std::path::Path) -> Datastore {
    Datastore::open(
        dir,
        StoreOptions {
            durability: Durability::Buffered,
        },
    )
    .unwrap()
}

fn token(scopes: &[(&str, &str)]) -> AccessToken {
    let claims = Claims {
        sub: "dashboard".into(),
        exp: ts("2030-01-01T00:00:00Z").unix_seconds(),
        scopes: scopes.iter().map(|(e, s)| Scope::new(e, s)).collect(),
    };
    verify_token(&issue_token(&claims, KEY), KEY, ts("2024-06-01T00:00:00Z")).unwrap()
}

/// Rows of (day, sleep_minutes, awakenings, sleep_efficiency).
fn table(rows: &[(&str, Option<i64>, i64, f64)]) -> Table {
    let mut t = Table::new(
        ["day", "sleep_minutes", "awakenings", "sleep_efficiency"]
            .map(String::from)
            .to_vec(),
    );
    for (day, minutes, awakenings, efficiency) in rows {
        t.rows.push(vec![
            json!(day),
            minutes.map(Value::from).unwrap_or(Value::Null),
            json!(awakenings),
            json!(efficiency),
        ]);
    }
    t
}

fn publish(store: &Datastore, environment: &str, study_id: &str, dataset_id: &str, rows: &Table) {
    let schema = study::code_schema();
    let run_id = format!("run-{dataset_id}-{environment}");
    let run = RunInfo {
        run_id: &run_id,
        pipeline_id: "sleep_daily",
        pipeline_version: 1,
        environment,
        study_id,
        generated_at: ts("2024-03-10T00:00:00Z"),
    };
    let sidecar = emit_discovery_metadata(&run, dataset_id, &schema, rows).to_document();
    store
        .record_code_validation(CodeValidationRecord::new(
            &run_id,
            &schema.schema_ref(),
            rows,
            ValidationReport::from_violations(dataset_id, vec![]),
        ))
        .unwrap();
    store
        .publish_outbound(&PublishRequest {
            dataset_id,
            environment,
            study_id,
            code_schema_ref: &schema.schema_ref(),
            rows,
            run_id: &run_id,
            sidecar: sidecar.as_bytes(),
            generated_at: run.generated_at,
            source_entries: &[],
        })
        .unwrap();
}

fn request(field: &str, from: &str, to: &str, group_by: GroupBy, aggregate: Aggregate) -> QueryRequest {
    QueryRequest {
        dataset_id: "sleep_daily".into(),
        environment: None,
        field: field.into(),
        from: ts(from),
        to: ts(to),
        group_by,
        aggregate,
    }
}

#[test]
fn mean_of_one_two_three_is_two() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    let rows = table(&[
        ("2024-03-01T00:00:00Z", Some(1), 0, 0.5),
        ("2024-03-01T00:00:00Z", Some(2), 0, 0.5),
        ("2024-03-01T00:00:00Z", Some(3), 0, 0.5),
    ]);
    publish(&store, "research", "s1", "sleep_daily", &rows);
    let access = AccessLayer::new(&store);
    let series = access
        .query_series(
            &token(&[("research", "s1")]),
            &request(
                "sleep_minutes",
                "2024-03-01T00:00:00Z",
                "2024-03-02T00:00:00Z",
                GroupBy::Day,
                Aggregate::Mean,
            ),
        )
        .unwrap();
    assert_eq!(series.row_count, 3);
    assert_eq!(
        series.points,
        vec![SeriesPoint {
            t: ts("2024-03-01T00:00:00Z"),
            value: json!(2.0)
        }]
    );
}

#[test]
fn range_outside_data_is_empty_and_inverted_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    publish(
        &store,
        "research",
        "s1",
        "sleep_daily",
        &table(&[("2024-03-01T00:00:00Z", Some(400), 2, 0.9)]),
    );
    let access = AccessLayer::new(&store);
    let t = token(&[("research", "s1")]);
    let series = access
        .query_series(
            &t,
            &request(
                "sleep_minutes",
                "2025-01-01T00:00:00Z",
                "2025-02-01T00:00:00Z",
                GroupBy::None,
                Aggregate::Count,
            ),
        )
        .unwrap();
    assert!(series.points.is_empty());
    assert_eq!(series.row_count, 0);
    let err = access
        .query_series(
            &t,
            &request(
                "sleep_minutes",
                "2025-02-01T00:00:00Z",
                "2025-01-01T00:00:00Z",
                GroupBy::None,
                Aggregate::Count,
            ),
        )
        .unwrap_err();
    assert_eq!(err.code(), "BAD_RANGE");
    let err = access
        .query_series(
            &t,
            &request(
                "mood",
                "2024-01-01T00:00:00Z",
                "2025-01-01T00:00:00Z",
                GroupBy::None,
                Aggregate::Count,
            ),
        )
        .unwrap_err();
    assert_eq!(err.code(), "UNKNOWN_FIELD");
    let err = access
        .query_series(
            &t,
            &request(
                "day",
                "2024-01-01T00:00:00Z",
                "2025-01-01T00:00:00Z",
                GroupBy::None,
                Aggregate::Mean,
            ),
        )
        .unwrap_err();
    assert_eq!(err.code(), "UNKNOWN_FIELD");
}

#[test]
fn catalog_and_queries_respect_scopes() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    let rows = table(&[("2024-03-01T00:00:00Z", Some(400), 2, 0.9)]);
    publish(&store, "research", "s1", "sleep_daily", &rows);
    publish(&store, "research", "s1", "sleep_weekly", &rows);
    publish(&store, "research", "s2", "other_study", &rows);
    publish(&store, "clinic", "s1", "sleep_daily", &rows);
    let access = AccessLayer::new(&store);

    let listed: Vec<(String, String)> = access
        .list_datasets(&token(&[("research", "s1")]))
        .unwrap()
        .into_iter()
        .map(|c| (c.environment, c.dataset_id))
        .collect();
    assert_eq!(
        listed,
        [
            ("research".to_string(), "sleep_daily".to_string()),
            ("research".into(), "sleep_weekly".into())
        ]
    );
    assert!(access.list_datasets(&token(&[("research", "s9")])).unwrap().is_empty());
    // Environment and study must come from the same scope.
    assert!(access
        .list_datasets(&token(&[("research", "s9"), ("clinic", "s2")]))
        .unwrap()
        .is_empty());

    let q = request(
        "sleep_minutes",
        "2024-01-01T00:00:00Z",
        "2025-01-01T00:00:00Z",
        GroupBy::None,
        Aggregate::Sum,
    );
    let err = access.query_series(&token(&[("research", "s2")]), &q).unwrap_err();
    assert_eq!(err.code(), "UNKNOWN_DATASET");
    let both = token(&[("research", "s1"), ("clinic", "s1")]);
    assert_eq!(access.query_series(&both, &q).unwrap_err().code(), "AMBIGUOUS_DATASET");
    let pinned = QueryRequest {
        environment: Some("clinic".into()),
        ..q
    };
    let series = access.query_series(&both, &pinned).unwrap();
    assert_eq!(series.environment, "clinic");
    assert_eq!(series.points[0].value, json!(400));
}

#[test]
fn expired_token_never_reaches_the_catalog() {
    let claims = Claims {
        sub: "dashboard".into(),
        exp: ts("2024-01-01T00:00:00Z").unix_seconds(),
        scopes: vec![Scope::new("research", "s1")],
    };
    let err: AccessError = verify_token(&issue_token(&claims, KEY), KEY, ts("2024-06-01T00:00:00Z"))
        .unwrap_err()
        .into();
    assert_eq!(err.code(), "UNAUTHORIZED");
}

#[test]
fn queries_do_not_change_store_state() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    publish(
        &store,
        "research",
        "s1",
        "sleep_daily",
        &table(&[("2024-03-01T00:00:00Z", Some(400), 2, 0.9)]),
    );
    let before = store.state_hash();
    let access = AccessLayer::new(&store);
    let t = token(&[("research", "s1")]);
    for field in ["sleep_minutes", "awakenings", "sleep_efficiency", "day", "nope"] {
        for aggregate in Aggregate::ALL {
            for group_by in GroupBy::ALL {
                let _ = access.query_series(
                    &t,
                    &request(
                        field,
                        "2024-01-01T00:00:00Z",
                        "2025-01-01T00:00:00Z",
                        group_by,
                        aggregate,
                    ),
                );
            }
        }
    }
    let _ = access.list_datasets(&t);
    assert_eq!(store.state_hash(), before);
}

/// Scan oracle: buckets derived from the timestamp text, sums in f64 and i128.
fn oracle(
    rows: &[(String, Option<i64>, i64, f64)],
    field: &str,
    from: &str,
    to: &str,
    group_by: GroupBy,
    aggregate: Aggregate,
) -> Vec<(String, f64)> {
    let mut buckets: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (day, minutes, awakenings, efficiency) in rows {
        if day.as_str() < from || day.as_str() > to {
            continue;
        }
        let key = match group_by {
            GroupBy::None => from.to_string(),
            GroupBy::Hour => format!("{}:00:00Z", &day[..13]),
            GroupBy::Day => format!("{}T00:00:00Z", &day[..10]),
        };
        let value = match field {
            "sleep_minutes" => minutes.map(|m| m as f64),
            "awakenings" => Some(*awakenings as f64),
            _ => Some(*efficiency),
        };
        if let Some(v) = value {
            buckets.entry(key).or_default().push(v);
        }
    }
    buckets
        .into_iter()
        .map(|(k, vs)| {
            let v = match aggregate {
                Aggregate::Count => vs.len() as f64,
                Aggregate::Sum => vs.iter().sum(),
                Aggregate::Mean => vs.iter().sum::<f64>() / vs.len() as f64,
                Aggregate::Min => vs.iter().cloned().fold(f64::INFINITY, f64::min),
                Aggregate::Max => vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            };
            (k, v)
        })
        .collect()
}

fn row_strategy() -> impl Strategy<Value = (String, Option<i64>, i64, f64)> {
    (
        0u32..5,
        0u32..24,
        0u32..60,
        prop::option::weighted(0.9, 0i64..1440),
        0i64..30,
        0.0f64..1.0,
    )
        .prop_map(|(d, h, m, minutes, awakenings, efficiency)| {
            (
                format!("2024-03-{:02}T{h:02}:{m:02}:00Z", d + 1),
                minutes,
                awakenings,
                efficiency,
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn query_matches_scan_oracle(
        rows in prop::collection::vec(row_strategy(), 0..200),
        from_day in 1u32..4,
        span_hours in 0u32..96,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let cells: Vec<(&str, Option<i64>, i64, f64)> = rows.iter().map(|(d, a, b, c)| (d.as_str(), *a, *b, *c)).collect();
        publish(&store, "research", "s1", "sleep_daily", &table(&cells));
        let access = AccessLayer::new(&store);
        let t = token(&[("research", "s1")]);
        let from = ts(&format!("2024-03-{from_day:02}T00:00:00Z"));
        let to = from.plus_seconds(span_hours as i64 * 3600);
        let (from_s, to_s) = (from.to_string(), to.to_string());
        for field in ["sleep_minutes", "awakenings", "sleep_efficiency"] {
            for aggregate in Aggregate::ALL {
                for group_by in GroupBy::ALL {
                    let got = access.query_series(&t, &request(field, &from_s, &to_s, group_by, aggregate)).unwrap();
                    let want = oracle(&rows, field, &from_s, &to_s, group_by, aggregate);
                    prop_assert_eq!(got.points.len(), want.len(), "{} {:?} {:?}", field, aggregate, group_by);
                    for (p, (k, v)) in got.points.iter().zip(&want) {
                        prop_assert_eq!(&p.t.to_string(), k);
                        let g = p.value.as_f64().unwrap();
                        prop_assert!((g - v).abs() <= 1e-9 * v.abs().max(1.0), "{} {:?} {:?}: {} vs {}", field, aggregate, group_by, g, v);
                        if field != "sleep_efficiency" && aggregate != Aggregate::Mean {
                            prop_assert!(p.value.is_i64() || p.value.is_u64());
                        }
                    }
                }
            }
        }
    }
}
