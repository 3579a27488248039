//! CIDE and CODE schema documents.
//!
//! A schema file is a JSON document:
//!
//! ```json
//! {
//!   "schema_id": "sleep_survey",
//!   "version": 1,
//!   "kind": "cide",
//!   "task_id": "sleep_survey",
//!   "fields": [
//!     { "name": "sleep_minutes", "kind": "integer", "required": true,
//!       "unit": "min", "constraints": { "min": 0, "max": 1440 } }
//!   ]
//! }
//! ```
//!
//! CODE documents carry `pipeline_id` instead of `task_id` and a
//! `vocabulary_bindings` object mapping each field to a vocabulary term.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ident::{is_identifier, is_snake_identifier};
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    String,
    Integer,
    Float,
    Boolean,
    Timestamp,
    Enum,
    BlobRef,
}

impl FieldKind {
    pub const ALL: [FieldKind; 7] = [
        FieldKind::String,
        FieldKind::Integer,
        FieldKind::Float,
        FieldKind::Boolean,
        FieldKind::Timestamp,
        FieldKind::Enum,
        FieldKind::BlobRef,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FieldKind::String => "string",
            FieldKind::Integer => "integer",
            FieldKind::Float => "float",
            FieldKind::Boolean => "boolean",
            FieldKind::Timestamp => "timestamp",
            FieldKind::Enum => "enum",
            FieldKind::BlobRef => "blob_ref",
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, FieldKind::Integer | FieldKind::Float)
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_time: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_time: Option<Timestamp>,
}

impl Constraints {
    pub fn is_empty(&self) -> bool {
        *self == Constraints::default()
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "is_false")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Constraints::is_empty")]
    pub constraints: Constraints,
    #[serde(default, skip_serializing_if = "is_false")]
    pub sensitive: bool,
}

impl FieldSpec {
    pub fn new(name: &str, kind: FieldKind) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind,
            required: false,
            unit: None,
            constraints: Constraints::default(),
            sensitive: false,
        }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn unit(mut self, unit: &str) -> Self {
        self.unit = Some(normalize_unit(unit));
        self
    }

    pub fn range(mut self, min: f64, max: f64) -> Self {
        self.constraints.min = Some(min);
        self.constraints.max = Some(max);
        self
    }

    pub fn values(mut self, values: &[&str]) -> Self {
        self.constraints.values = Some(values.iter().map(|v| v.to_string()).collect());
        self
    }

    pub fn sensitive(mut self) -> Self {
        self.sensitive = true;
        self
    }
}

/// Units compare as exact strings after trimming and collapsing inner whitespace.
pub fn normalize_unit(unit: &str) -> String {
    unit.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `(schema_id, version)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SchemaRef {
    pub schema_id: String,
    pub version: u32,
}

impl SchemaRef {
    pub fn new(schema_id: &str, version: u32) -> Self {
        SchemaRef {
            schema_id: schema_id.to_string(),
            version,
        }
    }
}

impl fmt::Display for SchemaRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@v{}", self.schema_id, self.version)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CideSchema {
    pub schema_id: String,
    pub version: u32,
    pub task_id: String,
    pub fields: Vec<FieldSpec>,
}

impl CideSchema {
    pub fn schema_ref(&self) -> SchemaRef {
        SchemaRef::new(&self.schema_id, self.version)
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeSchema {
    pub schema_id: String,
    pub version: u32,
    pub pipeline_id: String,
    pub fields: Vec<FieldSpec>,
    pub vocabulary_bindings: BTreeMap<String, String>,
}

impl CodeSchema {
    pub fn schema_ref(&self) -> SchemaRef {
        SchemaRef::new(&self.schema_id, self.version)
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// The first timestamp field, used as the time axis of published datasets.
    pub fn time_field(&self) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.kind == FieldKind::Timestamp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Schema {
    Cide(CideSchema),
    Code(CodeSchema),
}

impl Schema {
    pub fn schema_ref(&self) -> SchemaRef {
        match self {
            Schema::Cide(s) => s.schema_ref(),
            Schema::Code(s) => s.schema_ref(),
        }
    }

    pub fn fields(&self) -> &[FieldSpec] {
        match self {
            Schema::Cide(s) => &s.fields,
            Schema::Code(s) => &s.fields,
        }
    }

    /// Canonical document text: pretty JSON, fixed key order, trailing newline.
    pub fn to_document(&self) -> String {
        let raw = match self {
            Schema::Cide(s) => RawSchema {
                schema_id: s.schema_id.clone(),
                version: s.version,
                kind: RawKind::Cide,
                task_id: Some(s.task_id.clone()),
                pipeline_id: None,
                fields: s.fields.clone(),
                vocabulary_bindings: None,
            },
            Schema::Code(s) => RawSchema {
                schema_id: s.schema_id.clone(),
                version: s.version,
                kind: RawKind::Code,
                task_id: None,
                pipeline_id: Some(s.pipeline_id.clone()),
                fields: s.fields.clone(),
                vocabulary_bindings: Some(s.vocabulary_bindings.clone()),
            },
        };
        let mut out = serde_json::to_string_pretty(&raw).expect("schema serializes");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaError {
    #[error("PARSE_ERROR at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("INVARIANT_ERROR({code}){}: {message}", field.as_ref().map(|f| format!(" field `{f}`")).unwrap_or_default())]
    Invariant {
        code: &'static str,
        field: Option<String>,
        message: String,
    },
}

impl SchemaError {
    fn invariant(code: &'static str, field: Option<&str>, message: impl Into<String>) -> Self {
        SchemaError::Invariant {
            code,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            SchemaError::Parse { .. } => "PARSE_ERROR",
            SchemaError::Invariant { code, .. } => code,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Cide,
    Code,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    schema_id: String,
    version: u32,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pipeline_id: Option<String>,
    fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocabulary_bindings: Option<BTreeMap<String, String>>,
}

/// Parses a schema document and checks every schema invariant.
pub fn parse_schema(document: &str) -> Result<Schema, SchemaError> {
    let raw: RawSchema = serde_json::from_str(document).map_err(|e| SchemaError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    build_schema(raw)
}

fn build_schema(raw: RawSchema) -> Result<Schema, SchemaError> {
    if !is_identifier(&raw.schema_id) {
        return Err(SchemaError::invariant(
            "INVALID_IDENTIFIER",
            None,
            format!("schema_id `{}` is not a valid identifier", raw.schema_id),
        ));
    }
    if raw.version == 0 {
        return Err(SchemaError::invariant(
            "INVALID_VERSION",
            None,
            "version must be a positive integer",
        ));
    }
    let mut fields = raw.fields;
    check_fields(&mut fields)?;
    match raw.kind {
        RawKind::Cide => {
            if raw.pipeline_id.is_some() || raw.vocabulary_bindings.is_some() {
                return Err(SchemaError::invariant(
                    "KIND_MISMATCH",
                    None,
                    "cide schemas take `task_id` and no `pipeline_id` or `vocabulary_bindings`",
                ));
            }
            let task_id = raw
                .task_id
                .ok_or_else(|| SchemaError::invariant("MISSING_TASK_ID", None, "cide schemas require `task_id`"))?;
            if !is_identifier(&task_id) {
                return Err(SchemaError::invariant(
                    "INVALID_IDENTIFIER",
                    None,
                    format!("task_id `{task_id}` is not a valid identifier"),
                ));
            }
            Ok(Schema::Cide(CideSchema {
                schema_id: raw.schema_id,
                version: raw.version,
                task_id,
                fields,
            }))
        }
        RawKind::Code => {
            if raw.task_id.is_some() {
                return Err(SchemaError::invariant(
                    "KIND_MISMATCH",
                    None,
                    "code schemas take `pipeline_id`, not `task_id`",
                ));
            }
            let pipeline_id = raw.pipeline_id.ok_or_else(|| {
                SchemaError::invariant("MISSING_PIPELINE_ID", None, "code schemas require `pipeline_id`")
            })?;
            if !is_identifier(&pipeline_id) {
                return Err(SchemaError::invariant(
                    "INVALID_IDENTIFIER",
                    None,
                    format!("pipeline_id `{pipeline_id}` is not a valid identifier"),
                ));
            }
            let bindings = raw.vocabulary_bindings.unwrap_or_default();
            let schema = CodeSchema {
                schema_id: raw.schema_id,
                version: raw.version,
                pipeline_id,
                fields,
                vocabulary_bindings: bindings,
            };
            check_code_invariants(&schema)?;
            Ok(Schema::Code(schema))
        }
    }
}

/// CODE-specific invariants that need no vocabulary registry.
pub fn check_code_invariants(schema: &CodeSchema) -> Result<(), SchemaError> {
    for field in &schema.fields {
        if field.sensitive {
            return Err(SchemaError::invariant(
                "SENSITIVE_IN_CODE",
                Some(&field.name),
                "output data elements must not carry sensitive information",
            ));
        }
        if !schema.vocabulary_bindings.contains_key(&field.name) {
            return Err(SchemaError::invariant(
                "UNBOUND_VOCABULARY",
                Some(&field.name),
                "every output field needs a vocabulary binding",
            ));
        }
    }
    for (field, term) in &schema.vocabulary_bindings {
        if schema.field(field).is_none() {
            return Err(SchemaError::invariant(
                "BINDING_UNKNOWN_FIELD",
                Some(field),
                "binding names a field the schema does not declare",
            ));
        }
        if !is_snake_identifier(term) {
            return Err(SchemaError::invariant(
                "INVALID_IDENTIFIER",
                Some(field),
                format!("bound term `{term}` is not a valid term name"),
            ));
        }
    }
    Ok(())
}

fn check_fields(fields: &mut [FieldSpec]) -> Result<(), SchemaError> {
    let mut seen = BTreeSet::new();
    for field in fields.iter_mut() {
        let name = field.name.clone();
        let name = name.as_str();
        if !is_snake_identifier(name) {
            return Err(SchemaError::invariant(
                "INVALID_FIELD_NAME",
                Some(name),
                "field names are lowercase snake case, 1-64 characters",
            ));
        }
        if !seen.insert(name.to_string()) {
            return Err(SchemaError::invariant(
                "DUPLICATE_FIELD",
                Some(name),
                "field names must be unique within a schema",
            ));
        }
        if let Some(unit) = &field.unit {
            let normalized = normalize_unit(unit);
            if normalized.is_empty() {
                return Err(SchemaError::invariant(
                    "INVALID_UNIT",
                    Some(name),
                    "unit must not be blank",
                ));
            }
            field.unit = Some(normalized);
        }
        check_constraints(name, field.kind, &field.constraints)?;
    }
    Ok(())
}

fn check_constraints(name: &str, kind: FieldKind, c: &Constraints) -> Result<(), SchemaError> {
    let wrong_kind = |what: &str| {
        Err(SchemaError::invariant(
            "CONSTRAINT_KIND",
            Some(name),
            format!("`{what}` does not apply to {kind} fields"),
        ))
    };
    if (c.min.is_some() || c.max.is_some()) && !kind.is_numeric() {
        return wrong_kind("min/max");
    }
    if c.max_length.is_some() && kind != FieldKind::String {
        return wrong_kind("max_length");
    }
    if c.values.is_some() && kind != FieldKind::Enum {
        return wrong_kind("values");
    }
    if (c.min_time.is_some() || c.max_time.is_some()) && kind != FieldKind::Timestamp {
        return wrong_kind("min_time/max_time");
    }
    if let (Some(lo), Some(hi)) = (c.min, c.max) {
        if lo > hi {
            return Err(SchemaError::invariant(
                "MIN_GT_MAX",
                Some(name),
                format!("min {lo} exceeds max {hi}"),
            ));
        }
    }
    if let (Some(lo), Some(hi)) = (c.min_time, c.max_time) {
        if lo > hi {
            return Err(SchemaError::invariant(
                "MIN_GT_MAX",
                Some(name),
                format!("min_time {lo} is after max_time {hi}"),
            ));
        }
    }
    for bound in [c.min, c.max].into_iter().flatten() {
        if !bound.is_finite() {
            return Err(SchemaError::invariant(
                "INVALID_BOUND",
                Some(name),
                "numeric bounds must be finite",
            ));
        }
    }
    if kind == FieldKind::Enum {
        match &c.values {
            Some(values) if !values.is_empty() => {
                let distinct: BTreeSet<_> = values.iter().collect();
                if distinct.len() != values.len() {
                    return Err(SchemaError::invariant(
                        "DUPLICATE_ENUM_VALUE",
                        Some(name),
                        "enum values must be distinct",
                    ));
                }
            }
            _ => {
                return Err(SchemaError::invariant(
                    "EMPTY_ENUM",
                    Some(name),
                    "enum fields need a non-empty value list",
                ))
            }
        }
    }
    Ok(())
}
