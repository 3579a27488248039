//! The `meta.json` sidecar published next to every outbound dataset.
//!
//! Carries only schema-level facts and aggregates: no row values other
//! than the time extent, so no participant ids or sensitive fields.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{CodeSchema, FieldKind, SchemaRef};
use crate::table::Table;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineVersion {
    pub pipeline_id: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeCoverage {
    pub from: Timestamp,
    pub to: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetField {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryMetadata {
    pub dataset_id: String,
    pub environment: String,
    pub study_id: String,
    pub code_schema: SchemaRef,
    pub fields: Vec<DatasetField>,
    pub vocabulary_terms: Vec<String>,
    pub row_count: u64,
    pub time_coverage: Option<TimeCoverage>,
    pub pipeline: PipelineVersion,
    pub run_id: String,
    pub generated_at: Timestamp,
}

impl DiscoveryMetadata {
    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sidecar serializes");
        s.push('\n');
        s
    }
}

/// Run facts the sidecar needs; the run record itself is only complete
/// after publication.
pub struct RunInfo<'a> {
    pub run_id: &'a str,
    pub pipeline_id: &'a str,
    pub pipeline_version: u32,
    pub environment: &'a str,
    pub study_id: &'a str,
    pub generated_at: Timestamp,
}

pub fn emit_discovery_metadata(
    run: &RunInfo<'_>,
    dataset_id: &str,
    schema: &CodeSchema,
    rows: &Table,
) -> DiscoveryMetadata {
    let fields = schema
        .fields
        .iter()
        .map(|f| DatasetField {
            name: f.name.clone(),
            kind: f.kind,
            unit: f.unit.clone(),
            term: schema.vocabulary_bindings.get(&f.name).cloned(),
        })
        .collect();
    let vocabulary_terms: BTreeSet<String> = schema.vocabulary_bindings.values().cloned().collect();
    DiscoveryMetadata {
        dataset_id: dataset_id.to_string(),
        environment: run.environment.to_string(),
        study_id: run.study_id.to_string(),
        code_schema: schema.schema_ref(),
        fields,
        vocabulary_terms: vocabulary_terms.into_iter().collect(),
        row_count: rows.len() as u64,
        time_coverage: time_coverage(schema, rows),
        pipeline: PipelineVersion {
            pipeline_id: run.pipeline_id.to_string(),
            version: run.pipeline_version,
        },
        run_id: run.run_id.to_string(),
        generated_at: run.generated_at,
    }
}

fn time_coverage(schema: &CodeSchema, rows: &Table) -> Option<TimeCoverage> {
    let column = rows.column_index(&schema.time_field()?.name)?;
    let times = rows.rows.iter().filter_map(|r| match &r[column] {
        Value::String(s) => Timestamp::parse(s).ok(),
        _ => None,
    });
    let (from, to) = times.fold(None, |acc: Option<(Timestamp, Timestamp)>, t| match acc {
        None => Some((t, t)),
        Some((lo, hi)) => Some((lo.min(t), hi.max(t))),
    })?;
    Some(TimeCoverage { from, to })
}
