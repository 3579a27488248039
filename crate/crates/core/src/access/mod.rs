//! Read-only dataset access: the scoped catalog and time-bucketed
//! aggregate queries over published outbound datasets.

pub mod token;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

pub use token::{issue_token, verify_token, AccessToken, Claims, Scope, TokenError};

use crate::model::{FieldKind, SchemaRef};
use crate::pipeline::{DatasetField, DiscoveryMetadata, TimeCoverage};
use crate::store::{Datastore, OutboundManifest, StoreError};
use crate::table::Table;
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum AccessError {
    #[error("UNAUTHORIZED: {0}")]
    Unauthorized(String),
    #[error("UNKNOWN_DATASET: `{0}` is not available to this token")]
    UnknownDataset(String),
    #[error("AMBIGUOUS_DATASET: `{0}` is published in several environments; name one")]
    AmbiguousDataset(String),
    #[error("UNKNOWN_FIELD: {0}")]
    UnknownField(String),
    #[error("BAD_RANGE: from {from} is after to {to}")]
    BadRange { from: Timestamp, to: Timestamp },
    #[error("STORAGE_IO: {0}")]
    Storage(#[from] StoreError),
    #[error("CORRUPT_DATASET: {0}")]
    Corrupt(String),
}

impl AccessError {
    pub fn code(&self) -> &'static str {
        match self {
            AccessError::Unauthorized(_) => "UNAUTHORIZED",
            AccessError::UnknownDataset(_) => "UNKNOWN_DATASET",
            AccessError::AmbiguousDataset(_) => "AMBIGUOUS_DATASET",
            AccessError::UnknownField(_) => "UNKNOWN_FIELD",
            AccessError::BadRange { .. } => "BAD_RANGE",
            AccessError::Storage(e) => e.code(),
            AccessError::Corrupt(_) => "CORRUPT_DATASET",
        }
    }
}

impl From<TokenError> for AccessError {
    fn from(e: TokenError) -> Self {
        AccessError::Unauthorized(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub environment: String,
    pub study_id: String,
    pub dataset_id: String,
    pub code_schema: SchemaRef,
    pub coverage: Option<TimeCoverage>,
    pub row_count: u64,
    pub fields: Vec<DatasetField>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    None,
    Hour,
    Day,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Count,
    Mean,
    Min,
    Max,
    Sum,
}

impl GroupBy {
    pub const ALL: [GroupBy; 3] = [GroupBy::None, GroupBy::Hour, GroupBy::Day];
}

impl Aggregate {
    pub const ALL: [Aggregate; 5] = [
        Aggregate::Count,
        Aggregate::Mean,
        Aggregate::Min,
        Aggregate::Max,
        Aggregate::Sum,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub dataset_id: String,
    /// Needed only when the dataset id is published in more than one
    /// environment the token can see.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<String>,
    pub field: String,
    pub from: Timestamp,
    pub to: Timestamp,
    pub group_by: GroupBy,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: Timestamp,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySeries {
    pub environment: String,
    pub dataset_id: String,
    pub field: String,
    pub aggregate: Aggregate,
    pub group_by: GroupBy,
    /// Rows inside the time range.
    pub row_count: u64,
    pub points: Vec<SeriesPoint>,
}

/// Read-only view over the outbound zone of a datastore.
pub struct AccessLayer<'a> {
    store: &'a Datastore,
}

impl<'a> AccessLayer<'a> {
    pub fn new(store: &'a Datastore) -> Self {
        AccessLayer { store }
    }

    fn sidecar(&self, manifest: &OutboundManifest) -> Result<DiscoveryMetadata, AccessError> {
        let (_, meta) = self.store.read_outbound(manifest)?;
        serde_json::from_slice(&meta)
            .map_err(|e| AccessError::Corrupt(format!("{}/{} sidecar: {e}", manifest.environment, manifest.dataset_id)))
    }

    /// Datasets whose (environment, study) the token covers, ordered by
    /// environment then dataset id.
    pub fn list_datasets(&self, token: &AccessToken) -> Result<Vec<CatalogEntry>, AccessError> {
        self.store
            .manifests()
            .into_iter()
            .filter(|m| token.covers(&m.environment, &m.study_id))
            .map(|m| {
                let meta = self.sidecar(&m)?;
                Ok(CatalogEntry {
                    environment: m.environment,
                    study_id: m.study_id,
                    dataset_id: m.dataset_id,
                    code_schema: m.code_schema_ref,
                    coverage: meta.time_coverage,
                    row_count: m.row_count,
                    fields: meta.fields,
                })
            })
            .collect()
    }

    /// Out-of-scope datasets are reported exactly like missing ones.
    fn resolve(&self, token: &AccessToken, request: &QueryRequest) -> Result<OutboundManifest, AccessError> {
        let mut visible: Vec<OutboundManifest> = self
            .store
            .manifests()
            .into_iter()
            .filter(|m| m.dataset_id == request.dataset_id)
            .filter(|m| request.environment.as_ref().is_none_or(|e| *e == m.environment))
            .filter(|m| token.covers(&m.environment, &m.study_id))
            .collect();
        match visible.len() {
            0 => Err(AccessError::UnknownDataset(request.dataset_id.clone())),
            1 => Ok(visible.remove(0)),
            _ => Err(AccessError::AmbiguousDataset(request.dataset_id.clone())),
        }
    }

    pub fn query_series(&self, token: &AccessToken, request: &QueryRequest) -> Result<QuerySeries, AccessError> {
        let manifest = self.resolve(token, request)?;
        if request.from > request.to {
            return Err(AccessError::BadRange {
                from: request.from,
                to: request.to,
            });
        }
        let meta = self.sidecar(&manifest)?;
        let field =
            meta.fields.iter().find(|f| f.name == request.field).ok_or_else(|| {
                AccessError::UnknownField(format!("`{}` is not a field of this dataset", request.field))
            })?;
        if request.aggregate != Aggregate::Count && !field.kind.is_numeric() {
            return Err(AccessError::UnknownField(format!(
                "`{}` is {}; only count applies to non-numeric fields",
                field.name, field.kind
            )));
        }
        let time_field = meta
            .fields
            .iter()
            .find(|f| f.kind == FieldKind::Timestamp)
            .ok_or_else(|| AccessError::UnknownField("dataset has no timestamp field to range over".into()))?;

        let (data, _) = self.store.read_outbound(&manifest)?;
        let kinds: BTreeMap<&str, FieldKind> = meta.fields.iter().map(|f| (f.name.as_str(), f.kind)).collect();
        let table = Table::from_csv_typed(&data, &|c| kinds.get(c).copied())
            .map_err(|e| AccessError::Corrupt(e.to_string()))?;
        let time_col = table
            .column_index(&time_field.name)
            .ok_or_else(|| AccessError::Corrupt(format!("column `{}` missing", time_field.name)))?;
        let value_col = table
            .column_index(&field.name)
            .ok_or_else(|| AccessError::Corrupt(format!("column `{}` missing", field.name)))?;

        let mut row_count = 0;
        let mut buckets: BTreeMap<Timestamp, Bucket> = BTreeMap::new();
        for row in &table.rows {
            let Some(t) = row[time_col].as_str().and_then(|s| Timestamp::parse(s).ok()) else {
                continue;
            };
            if t < request.from || t > request.to {
                continue;
            }
            row_count += 1;
            let start = match request.group_by {
                GroupBy::None => request.from,
                GroupBy::Hour => t.start_of_hour(),
                GroupBy::Day => t.start_of_day(),
            };
            match &row[value_col] {
                Value::Null => {}
                Value::Number(n) => buckets.entry(start).or_default().push_number(n),
                _ => buckets.entry(start).or_default().count += 1,
            }
        }
        Ok(QuerySeries {
            environment: manifest.environment,
            dataset_id: manifest.dataset_id,
            field: field.name.clone(),
            aggregate: request.aggregate,
            group_by: request.group_by,
            row_count,
            points: buckets
                .into_iter()
                .map(|(t, b)| SeriesPoint {
                    t,
                    value: b.finish(request.aggregate),
                })
                .collect(),
        })
    }
}

/// Accumulator for one bucket. Integer columns are summed exactly.
#[derive(Default)]
struct Bucket {
    count: u64,
    int_sum: i128,
    float_sum: f64,
    floats: bool,
    min: Option<Number>,
    max: Option<Number>,
}

impl Bucket {
    fn push_number(&mut self, n: &Number) {
        self.count += 1;
        match n.as_i64() {
            Some(i) => {
                self.int_sum += i as i128;
                self.float_sum += i as f64;
            }
            None => {
                self.floats = true;
                self.float_sum += n.as_f64().unwrap_or(f64::NAN);
            }
        }
        let x = n.as_f64().unwrap_or(f64::NAN);
        if self.min.as_ref().is_none_or(|m| x < m.as_f64().unwrap_or(f64::NAN)) {
            self.min = Some(n.clone());
        }
        if self.max.as_ref().is_none_or(|m| x > m.as_f64().unwrap_or(f64::NAN)) {
            self.max = Some(n.clone());
        }
    }

    fn finish(&self, aggregate: Aggregate) -> Value {
        let float = |f: f64| Number::from_f64(f).map(Value::Number).unwrap_or(Value::Null);
        match aggregate {
            Aggregate::Count => Value::from(self.count),
            Aggregate::Min => self.min.clone().map(Value::Number).unwrap_or(Value::Null),
            Aggregate::Max => self.max.clone().map(Value::Number).unwrap_or(Value::Null),
            Aggregate::Sum if !self.floats => match i64::try_from(self.int_sum) {
                Ok(i) => Value::from(i),
                Err(_) => float(self.int_sum as f64),
            },
            Aggregate::Sum => float(self.float_sum),
            Aggregate::Mean if !self.floats => float(self.int_sum as f64 / self.count as f64),
            Aggregate::Mean => float(self.float_sum / self.count as f64),
        }
    }
}

#[cfg(test)]
mod tests;
