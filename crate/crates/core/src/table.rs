//! In-memory tables exchanged between pipeline nodes and published as CSV.

use serde_json::{Map, Number, Value};

use crate::model::FieldKind;
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row} has {got} cells, header has {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("missing header row")]
    NoHeader,
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("row {row}, column `{column}`: `{cell}` is not a valid {kind}")]
    Cell {
        row: usize,
        column: String,
        cell: String,
        kind: FieldKind,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Table {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows as maps keyed by column name; null cells are omitted.
    pub fn row_maps(&self) -> Vec<Map<String, Value>> {
        self.rows
            .iter()
            .map(|row| {
                self.columns
                    .iter()
                    .zip(row)
                    .filter(|(_, v)| !v.is_null())
                    .map(|(c, v)| (c.clone(), v.clone()))
                    .collect()
            })
            .collect()
    }

    /// UTF-8 CSV with a header row. Nulls are empty cells; floats use the
    /// shortest representation that round-trips.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text)).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    /// Parses CSV, inferring each cell: integer, then float, then boolean,
    /// else string. Empty cells are null.
    pub fn from_csv(bytes: &[u8]) -> Result<Table, TableError> {
        Self::parse(bytes, |_, _, cell| Ok(infer_cell(cell)))
    }

    /// Parses CSV whose columns are typed by `kinds` (looked up by column
    /// name; unknown columns are inferred).
    pub fn from_csv_typed(bytes: &[u8], kinds: &dyn Fn(&str) -> Option<FieldKind>) -> Result<Table, TableError> {
        Self::parse(bytes, |row, column, cell| match kinds(column) {
            None => Ok(infer_cell(cell)),
            Some(kind) => typed_cell(cell, kind).ok_or_else(|| TableError::Cell {
                row,
                column: column.to_string(),
                cell: cell.to_string(),
                kind,
            }),
        })
    }

    fn parse(
        bytes: &[u8],
        mut convert: impl FnMut(usize, &str, &str) -> Result<Value, TableError>,
    ) -> Result<Table, TableError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(bytes);
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if columns.is_empty() {
            return Err(TableError::NoHeader);
        }
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(TableError::DuplicateColumn(c.clone()));
            }
        }
        let mut table = Table::new(columns);
        for (row_no, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != table.columns.len() {
                return Err(TableError::Ragged {
                    row: row_no,
                    got: record.len(),
                    expected: table.columns.len(),
                });
            }
            let row = record
                .iter()
                .zip(&table.columns)
                .map(|(cell, column)| convert(row_no, column, cell))
                .collect::<Result<Vec<_>, _>>()?;
            table.rows.push(row);
        }
        Ok(table)
    }
}

fn cell_text(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn infer_cell(cell: &str) -> Value {
    if cell.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = cell.parse::<i64>() {
        return Value::from(i);
    }
    if looks_numeric(cell) {
        if let Some(n) = cell.parse::<f64>().ok().and_then(Number::from_f64) {
            return Value::Number(n);
        }
    }
    match cell {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(cell.to_string()),
    }
}

/// Rejects `inf`, `NaN` and similar words that `f64::from_str` accepts.
fn looks_numeric(cell: &str) -> bool {
    cell.bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'-' | b'+' | b'.' | b'e' | b'E'))
}

fn typed_cell(cell: &str, kind: FieldKind) -> Option<Value> {
    if cell.is_empty() {
        return Some(Value::Null);
    }
    match kind {
        FieldKind::Integer => cell.parse::<i64>().ok().map(Value::from),
        FieldKind::Float => {
            if !looks_numeric(cell) {
                return None;
            }
            cell.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number)
        }
        FieldKind::Boolean => match cell {
            "true" => Some(Value::Bool(true)),
            "false" => Some(Value::Bool(false)),
            _ => None,
        },
        FieldKind::Timestamp => Timestamp::parse(cell).ok().map(|_| Value::String(cell.to_string())),
        FieldKind::String | FieldKind::Enum | FieldKind::BlobRef => Some(Value::String(cell.to_string())),
    }
}
