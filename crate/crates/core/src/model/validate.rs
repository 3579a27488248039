//! Exhaustive validation of record payloads against CIDE schemas and of
//! pipeline output tables against CODE schemas.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::schema::{CideSchema, CodeSchema, FieldKind, FieldSpec};
use super::vocab::{TermStatus, VocabularyRegistry};
use crate::digest::is_sha256_hex;
use crate::time::Timestamp;

/// Field name used for violations that concern the record envelope.
pub const ENVELOPE_FIELD: &str = "$envelope";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    MissingRequired,
    UnknownField,
    TypeMismatch,
    RangeViolation,
    EnumViolation,
    UnitMismatch,
    SensitiveInCode,
    UnboundVocabulary,
    UnknownTerm,
    TermNotAccepted,
    SchemaNotFound,
}

impl ViolationCode {
    pub const ALL: [ViolationCode; 11] = [
        ViolationCode::MissingRequired,
        ViolationCode::UnknownField,
        ViolationCode::TypeMismatch,
        ViolationCode::RangeViolation,
        ViolationCode::EnumViolation,
        ViolationCode::UnitMismatch,
        ViolationCode::SensitiveInCode,
        ViolationCode::UnboundVocabulary,
        ViolationCode::UnknownTerm,
        ViolationCode::TermNotAccepted,
        ViolationCode::SchemaNotFound,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::MissingRequired => "MISSING_REQUIRED",
            ViolationCode::UnknownField => "UNKNOWN_FIELD",
            ViolationCode::TypeMismatch => "TYPE_MISMATCH",
            ViolationCode::RangeViolation => "RANGE_VIOLATION",
            ViolationCode::EnumViolation => "ENUM_VIOLATION",
            ViolationCode::UnitMismatch => "UNIT_MISMATCH",
            ViolationCode::SensitiveInCode => "SENSITIVE_IN_CODE",
            ViolationCode::UnboundVocabulary => "UNBOUND_VOCABULARY",
            ViolationCode::UnknownTerm => "UNKNOWN_TERM",
            ViolationCode::TermNotAccepted => "TERM_NOT_ACCEPTED",
            ViolationCode::SchemaNotFound => "SCHEMA_NOT_FOUND",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub code: ViolationCode,
    pub message: String,
}

impl Violation {
    pub fn new(field: &str, code: ViolationCode, message: impl Into<String>) -> Self {
        Violation {
            field: field.to_string(),
            code,
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Valid,
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub subject_id: String,
    pub outcome: Outcome,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// Builds a report from collected violations, ordering them by
    /// `(field, code)` and deriving the outcome.
    pub fn from_violations(subject_id: &str, mut violations: Vec<Violation>) -> Self {
        // Stable sort: within equal (field, code) keep discovery order.
        violations.sort_by(|a, b| (&a.field, a.code.as_str()).cmp(&(&b.field, b.code.as_str())));
        let outcome = if violations.is_empty() {
            Outcome::Valid
        } else {
            Outcome::Invalid
        };
        ValidationReport {
            subject_id: subject_id.to_string(),
            outcome,
            violations,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.outcome == Outcome::Valid
    }

    pub fn has(&self, field: &str, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.field == field && v.code == code)
    }

    /// `(field, code)` pairs in report order.
    pub fn pairs(&self) -> Vec<(String, ViolationCode)> {
        self.violations.iter().map(|v| (v.field.clone(), v.code)).collect()
    }
}

/// Checks a present, non-null value against one field spec.
fn check_value(spec: &FieldSpec, value: &Value) -> Option<(ViolationCode, String)> {
    let c = &spec.constraints;
    let type_mismatch = || {
        Some((
            ViolationCode::TypeMismatch,
            format!("expected {}, got {}", spec.kind, json_type_name(value)),
        ))
    };
    match spec.kind {
        FieldKind::String => {
            let Value::String(s) = value else {
                return type_mismatch();
            };
            if let Some(max) = c.max_length {
                let len = s.chars().count() as u64;
                if len > max {
                    return Some((
                        ViolationCode::RangeViolation,
                        format!("length {len} exceeds max_length {max}"),
                    ));
                }
            }
            None
        }
        FieldKind::Integer | FieldKind::Float => {
            let number = match value {
                Value::Number(n) if spec.kind == FieldKind::Float => n.as_f64(),
                Value::Number(n) if n.is_i64() || n.is_u64() => n.as_f64(),
                _ => None,
            };
            let Some(x) = number else {
                return type_mismatch();
            };
            if let Some(min) = c.min {
                if x < min {
                    return Some((ViolationCode::RangeViolation, format!("{value} is below min {min}")));
                }
            }
            if let Some(max) = c.max {
                if x > max {
                    return Some((ViolationCode::RangeViolation, format!("{value} is above max {max}")));
                }
            }
            None
        }
        FieldKind::Boolean => match value {
            Value::Bool(_) => None,
            _ => type_mismatch(),
        },
        FieldKind::Timestamp => {
            let Some(t) = value.as_str().and_then(|s| Timestamp::parse(s).ok()) else {
                return type_mismatch();
            };
            if c.min_time.is_some_and(|lo| t < lo) || c.max_time.is_some_and(|hi| t > hi) {
                return Some((
                    ViolationCode::RangeViolation,
                    format!("{t} is outside the permitted time range"),
                ));
            }
            None
        }
        FieldKind::Enum => {
            let Value::String(s) = value else {
                return type_mismatch();
            };
            let allowed = c.values.as_deref().unwrap_or_default();
            if allowed.iter().any(|v| v == s) {
                None
            } else {
                Some((ViolationCode::EnumViolation, format!("`{s}` is not one of {allowed:?}")))
            }
        }
        FieldKind::BlobRef => match value {
            Value::String(s) if is_sha256_hex(s) => None,
            _ => type_mismatch(),
        },
    }
}

fn json_type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_f64() => "float",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_row(fields: &[FieldSpec], row: &Map<String, Value>, context: &str, out: &mut Vec<Violation>) {
    for spec in fields {
        match row.get(&spec.name) {
            None | Some(Value::Null) => {
                if spec.required {
                    out.push(Violation::new(
                        &spec.name,
                        ViolationCode::MissingRequired,
                        format!("{context}required field is missing"),
                    ));
                }
            }
            Some(value) => {
                if let Some((code, message)) = check_value(spec, value) {
                    out.push(Violation::new(&spec.name, code, format!("{context}{message}")));
                }
            }
        }
    }
}

/// Validates a record payload against a CIDE schema.
///
/// Every violation is reported, ordered by `(field, code)`. Payload keys the
/// schema does not declare are `UNKNOWN_FIELD` violations.
pub fn validate_record(subject_id: &str, payload: &Map<String, Value>, schema: &CideSchema) -> ValidationReport {
    let mut violations = Vec::new();
    check_row(&schema.fields, payload, "", &mut violations);
    for key in payload.keys() {
        if schema.field(key).is_none() {
            violations.push(Violation::new(
                key,
                ViolationCode::UnknownField,
                "field is not declared by the schema",
            ));
        }
    }
    ValidationReport::from_violations(subject_id, violations)
}

/// Validates tabular pipeline output against a CODE schema and the vocabulary.
///
/// Schema-level checks (sensitivity, bindings, term status, kind and unit
/// agreement) are reported once per field; row checks once per offending
/// cell. Columns that appear in the rows but are not bound by the schema are
/// reported as `UNBOUND_VOCABULARY`.
pub fn validate_output(
    subject_id: &str,
    rows: &[Map<String, Value>],
    schema: &CodeSchema,
    registry: &VocabularyRegistry,
) -> ValidationReport {
    let mut violations = Vec::new();
    for field in &schema.fields {
        if field.sensitive {
            violations.push(Violation::new(
                &field.name,
                ViolationCode::SensitiveInCode,
                "output fields must not be sensitive",
            ));
        }
        let Some(term_name) = schema.vocabulary_bindings.get(&field.name) else {
            violations.push(Violation::new(
                &field.name,
                ViolationCode::UnboundVocabulary,
                "field has no vocabulary binding",
            ));
            continue;
        };
        let Ok(term) = registry.resolve(term_name) else {
            violations.push(Violation::new(
                &field.name,
                ViolationCode::UnknownTerm,
                format!("bound term `{term_name}` is not in the vocabulary"),
            ));
            continue;
        };
        if term.status != TermStatus::Accepted {
            violations.push(Violation::new(
                &field.name,
                ViolationCode::TermNotAccepted,
                format!("term `{}` is {}", term.canonical_name, term.status),
            ));
        }
        if term.kind != field.kind {
            violations.push(Violation::new(
                &field.name,
                ViolationCode::TypeMismatch,
                format!(
                    "field is {} but term `{}` is {}",
                    field.kind, term.canonical_name, term.kind
                ),
            ));
        }
        if term.unit != field.unit {
            violations.push(Violation::new(
                &field.name,
                ViolationCode::UnitMismatch,
                format!("field unit {:?} differs from term unit {:?}", field.unit, term.unit),
            ));
        }
    }
    let extra: BTreeSet<&String> = rows
        .iter()
        .flat_map(|row| row.keys())
        .filter(|k| schema.field(k).is_none())
        .collect();
    for column in extra {
        violations.push(Violation::new(
            column,
            ViolationCode::UnboundVocabulary,
            "output column is not bound to any vocabulary term",
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        check_row(&schema.fields, row, &format!("row {i}: "), &mut violations);
    }
    ValidationReport::from_violations(subject_id, violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::schema::{parse_schema, Schema};
    use crate::model::vocab::{TermStatus, VocabularyTerm};
    use crate::time::Timestamp;
    use serde_json::json;

    fn heart_schema() -> CideSchema {
        let doc = r#"{"schema_id":"vitals","version":1,"kind":"cide","task_id":"bed",
            "fields":[{"name":"heart_rate","kind":"float","required":true,"unit":"beats/min",
            "constraints":{"min":20,"max":250}}]}"#;
        match parse_schema(doc).unwrap() {
            Schema::Cide(s) => s,
            _ => unreachable!(),
        }
    }

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn in_range_is_valid() {
        let r = validate_record("r1", &obj(json!({"heart_rate": 72.0})), &heart_schema());
        assert!(r.is_valid());
        assert!(r.violations.is_empty());
    }

    #[test]
    fn missing_required() {
        let r = validate_record("r1", &obj(json!({})), &heart_schema());
        assert_eq!(
            r.pairs(),
            vec![("heart_rate".to_string(), ViolationCode::MissingRequired)]
        );
        assert_eq!(r.outcome, Outcome::Invalid);
    }

    #[test]
    fn range_and_unknown_are_both_reported() {
        let r = validate_record("r1", &obj(json!({"heart_rate": 300.0, "mood": "ok"})), &heart_schema());
        assert_eq!(
            r.pairs(),
            vec![
                ("heart_rate".to_string(), ViolationCode::RangeViolation),
                ("mood".to_string(), ViolationCode::UnknownField),
            ]
        );
    }

    #[test]
    fn null_counts_as_missing_and_types_are_checked() {
        let s = heart_schema();
        assert!(validate_record("r", &obj(json!({"heart_rate": null})), &s)
            .has("heart_rate", ViolationCode::MissingRequired));
        assert!(
            validate_record("r", &obj(json!({"heart_rate": "72"})), &s).has("heart_rate", ViolationCode::TypeMismatch)
        );
        // integers are acceptable floats
        assert!(validate_record("r", &obj(json!({"heart_rate": 72})), &s).is_valid());
    }

    #[test]
    fn kinds() {
        let mut s = heart_schema();
        s.fields = vec![
            FieldSpec::new("n", FieldKind::Integer),
            FieldSpec::new("b", FieldKind::Boolean),
            FieldSpec::new("t", FieldKind::Timestamp),
            FieldSpec::new("e", FieldKind::Enum).values(&["good", "poor"]),
            FieldSpec::new("h", FieldKind::BlobRef),
        ];
        let ok = obj(json!({"n": 3, "b": true, "t": "2023-01-01T00:00:00Z", "e": "good",
            "h": crate::digest::sha256_hex(b"x")}));
        assert!(validate_record("r", &ok, &s).is_valid());
        let bad = obj(json!({"n": 3.5, "b": 1, "t": "yesterday", "e": "meh", "h": "abc"}));
        let r = validate_record("r", &bad, &s);
        assert_eq!(
            r.pairs(),
            vec![
                ("b".to_string(), ViolationCode::TypeMismatch),
                ("e".to_string(), ViolationCode::EnumViolation),
                ("h".to_string(), ViolationCode::TypeMismatch),
                ("n".to_string(), ViolationCode::TypeMismatch),
                ("t".to_string(), ViolationCode::TypeMismatch),
            ]
        );
    }

    #[test]
    fn report_is_deterministic() {
        let p = obj(json!({"zeta": 1, "alpha": 2, "heart_rate": 1000}));
        let a = serde_json::to_vec(&validate_record("x", &p, &heart_schema())).unwrap();
        let b = serde_json::to_vec(&validate_record("x", &p, &heart_schema())).unwrap();
        assert_eq!(a, b);
    }

    fn sleep_code() -> CodeSchema {
        CodeSchema {
            schema_id: "sleep_out".into(),
            version: 1,
            pipeline_id: "sleep".into(),
            fields: vec![FieldSpec::new("sleep_minutes", FieldKind::Integer).unit("min")],
            vocabulary_bindings: [("sleep_minutes".to_string(), "sleep_minutes".to_string())]
                .into_iter()
                .collect(),
        }
    }

    fn term(status_accept: bool) -> VocabularyRegistry {
        let reg = VocabularyRegistry::in_memory();
        reg.register(VocabularyTerm {
            canonical_name: "sleep_minutes".into(),
            definition: "minutes asleep".into(),
            kind: FieldKind::Integer,
            unit: Some("min".into()),
            aliases: vec![],
            status: TermStatus::Proposed,
            proposed_by: "env-a".into(),
            proposed_at: Timestamp::parse("2023-01-01T00:00:00Z").unwrap(),
            decision: None,
        })
        .unwrap();
        if status_accept {
            reg.accept(
                "sleep_minutes",
                "ops",
                Timestamp::parse("2023-01-02T00:00:00Z").unwrap(),
            )
            .unwrap();
        }
        reg
    }

    #[test]
    fn output_valid_with_accepted_term() {
        let rows = vec![obj(json!({"sleep_minutes": 412}))];
        assert!(validate_output("d", &rows, &sleep_code(), &term(true)).is_valid());
    }

    #[test]
    fn output_term_not_accepted() {
        let rows = vec![obj(json!({"sleep_minutes": 412}))];
        let r = validate_output("d", &rows, &sleep_code(), &term(false));
        assert_eq!(
            r.pairs(),
            vec![("sleep_minutes".to_string(), ViolationCode::TermNotAccepted)]
        );
    }

    #[test]
    fn output_unknown_term_and_unbound_column() {
        let mut schema = sleep_code();
        schema
            .vocabulary_bindings
            .insert("sleep_minutes".into(), "nonexistent".into());
        let rows = vec![obj(json!({"sleep_minutes": 412, "participant_id": "p1"}))];
        let r = validate_output("d", &rows, &schema, &term(true));
        assert_eq!(
            r.pairs(),
            vec![
                ("participant_id".to_string(), ViolationCode::UnboundVocabulary),
                ("sleep_minutes".to_string(), ViolationCode::UnknownTerm),
            ]
        );
    }

    #[test]
    fn output_unit_and_kind_mismatch() {
        let mut schema = sleep_code();
        schema.fields[0] = FieldSpec::new("sleep_minutes", FieldKind::Float).unit("h");
        let r = validate_output("d", &[], &schema, &term(true));
        assert_eq!(
            r.pairs(),
            vec![
                ("sleep_minutes".to_string(), ViolationCode::TypeMismatch),
                ("sleep_minutes".to_string(), ViolationCode::UnitMismatch),
            ]
        );
    }
}
