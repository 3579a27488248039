//! Built-in nodes: store access, windowed statistics, resampling, joins,
//! threshold flags and column projection.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::{Number, Value};

use super::node::{
    Artifact, Inputs, NodeContext, NodeLogic, NodeManifest, NodeRegistry, Outputs, ParamKind, ParamSpec, Params, Port,
    PortKind,
};
use crate::store::{Lifecycle, MetadataFilter};
use crate::table::Table;
use crate::time::Timestamp;

pub const BUILTIN_VERSION: &str = "1.0.0";

/// A registry holding every built-in node.
pub fn builtin_registry() -> NodeRegistry {
    let registry = NodeRegistry::new();
    for (manifest, logic) in builtins() {
        registry
            .register(manifest, logic)
            .expect("built-in manifests are valid");
    }
    registry
}

pub fn builtins() -> Vec<(NodeManifest, Arc<dyn NodeLogic>)> {
    vec![
        (
            manifest(
                "store_source",
                &[],
                &["table"],
                vec![
                    param("study_id", ParamKind::String, Some("")),
                    param("task_id", ParamKind::String, None),
                    param("lifecycle", ParamKind::String, Some("production")),
                ],
            ),
            Arc::new(store_source),
        ),
        (
            manifest(
                "window_stats",
                &["table"],
                &["table"],
                vec![
                    param("time_column", ParamKind::String, Some("capture_time")),
                    param("window", ParamKind::String, Some("day")),
                    param("group_by", ParamKind::String, Some("")),
                    param("value_columns", ParamKind::String, None),
                    param("stat", ParamKind::String, Some("mean")),
                    param("window_column", ParamKind::String, Some("window_start")),
                ],
            ),
            Arc::new(window_stats),
        ),
        (
            manifest(
                "resample",
                &["table"],
                &["table"],
                vec![
                    param("time_column", ParamKind::String, Some("capture_time")),
                    param("window", ParamKind::String, Some("hour")),
                ],
            ),
            Arc::new(resample),
        ),
        (
            manifest(
                "join",
                &["left", "right"],
                &["table"],
                vec![param("keys", ParamKind::String, None)],
            ),
            Arc::new(join),
        ),
        (
            manifest(
                "threshold_flag",
                &["table"],
                &["table"],
                vec![
                    param("column", ParamKind::String, None),
                    param("op", ParamKind::String, Some("gt")),
                    ParamSpec {
                        name: "threshold".into(),
                        kind: ParamKind::Float,
                        default: None,
                    },
                    param("output_column", ParamKind::String, Some("flag")),
                ],
            ),
            Arc::new(threshold_flag),
        ),
        (
            manifest(
                "select_columns",
                &["table"],
                &["table"],
                vec![param("columns", ParamKind::String, None)],
            ),
            Arc::new(select_columns),
        ),
    ]
}

fn manifest(id: &str, inputs: &[&str], outputs: &[&str], parameters: Vec<ParamSpec>) -> NodeManifest {
    let ports = |names: &[&str]| {
        names
            .iter()
            .map(|n| Port {
                name: n.to_string(),
                kind: PortKind::Table,
            })
            .collect()
    };
    NodeManifest {
        node_id: id.to_string(),
        version: BUILTIN_VERSION.to_string(),
        entrypoint: format!("builtin:{id}"),
        input_ports: ports(inputs),
        output_ports: ports(outputs),
        parameters,
        env_requirements: vec![],
    }
}

fn param(name: &str, kind: ParamKind, default: Option<&str>) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        kind,
        default: default.map(Value::from),
    }
}

fn str_param<'a>(params: &'a Params, name: &str) -> Result<&'a str, String> {
    params
        .get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("parameter `{name}` must be a string"))
}

fn list_param(params: &Params, name: &str) -> Result<Vec<String>, String> {
    Ok(str_param(params, name)?
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect())
}

fn table_input<'a>(inputs: &'a Inputs, port: &str) -> Result<&'a Table, String> {
    match inputs.get(port) {
        Some(Artifact::Table(t)) => Ok(t),
        Some(_) => Err(format!("input `{port}` is not a table")),
        None => Err(format!("input `{port}` is not connected")),
    }
}

fn column(table: &Table, name: &str) -> Result<usize, String> {
    table
        .column_index(name)
        .ok_or_else(|| format!("table has no column `{name}`"))
}

fn single(table: Table) -> Outputs {
    BTreeMap::from([("table".to_string(), Artifact::Table(table))])
}

#[derive(Clone, Copy)]
enum Window {
    Day,
    Hour,
}

impl Window {
    fn parse(s: &str) -> Result<Window, String> {
        match s {
            "day" => Ok(Window::Day),
            "hour" => Ok(Window::Hour),
            other => Err(format!("unknown window `{other}`")),
        }
    }

    fn start(self, t: Timestamp) -> Timestamp {
        match self {
            Window::Day => t.start_of_day(),
            Window::Hour => t.start_of_hour(),
        }
    }
}

fn timestamp_cell(value: &Value, column: &str) -> Result<Timestamp, String> {
    value
        .as_str()
        .and_then(|s| Timestamp::parse(s).ok())
        .ok_or_else(|| format!("column `{column}`: `{value}` is not a UTC timestamp"))
}

/// Staged or production entries of one task as a table: participant, device
/// and capture time, then the union of inline fields in name order.
fn store_source(ctx: &NodeContext<'_>, _: &Inputs, params: &Params) -> Result<Outputs, String> {
    let study = match str_param(params, "study_id")? {
        "" => ctx.study_id,
        s => s,
    };
    let lifecycle: Lifecycle = str_param(params, "lifecycle")?.parse()?;
    let entries = ctx.store.query_metadata(&MetadataFilter {
        study_id: Some(study.to_string()),
        task_id: Some(str_param(params, "task_id")?.to_string()),
        lifecycle: Some(lifecycle),
        ..Default::default()
    });
    let payload_columns: BTreeSet<&String> = entries.iter().flat_map(|e| e.inline_fields.keys()).collect();
    let mut table = Table::new(
        ["participant_id", "device_id", "capture_time"]
            .into_iter()
            .map(str::to_string)
            .chain(payload_columns.iter().map(|c| c.to_string()))
            .collect(),
    );
    for e in &entries {
        let mut row = vec![
            Value::from(e.participant_id.clone()),
            Value::from(e.device_id.clone()),
            Value::from(e.capture_time.to_string()),
        ];
        row.extend(
            payload_columns
                .iter()
                .map(|c| e.inline_fields.get(*c).cloned().unwrap_or(Value::Null)),
        );
        table.rows.push(row);
    }
    ctx.note_consumed(entries.into_iter().map(|e| e.entry_id));
    Ok(single(table))
}

#[derive(Clone, Copy, PartialEq)]
enum Stat {
    Mean,
    Sum,
    Min,
    Max,
    Count,
}

impl Stat {
    fn parse(s: &str) -> Result<Stat, String> {
        Ok(match s {
            "mean" => Stat::Mean,
            "sum" => Stat::Sum,
            "min" => Stat::Min,
            "max" => Stat::Max,
            "count" => Stat::Count,
            other => return Err(format!("unknown stat `{other}`")),
        })
    }
}

/// Running aggregate of one column within one group. Integers stay exact.
#[derive(Default)]
struct Acc {
    count: u64,
    int_sum: i128,
    float_sum: f64,
    all_int: bool,
    min: Option<Number>,
    max: Option<Number>,
}

impl Acc {
    fn new() -> Acc {
        Acc {
            all_int: true,
            ..Default::default()
        }
    }

    fn push(&mut self, n: &Number) {
        self.count += 1;
        match n.as_i64() {
            Some(i) => {
                self.int_sum += i as i128;
                self.float_sum += i as f64;
            }
            None => {
                self.all_int = false;
                self.float_sum += n.as_f64().unwrap_or(f64::NAN);
            }
        }
        let f = n.as_f64().unwrap_or(f64::NAN);
        if self.min.as_ref().is_none_or(|m| f < m.as_f64().unwrap_or(f64::NAN)) {
            self.min = Some(n.clone());
        }
        if self.max.as_ref().is_none_or(|m| f > m.as_f64().unwrap_or(f64::NAN)) {
            self.max = Some(n.clone());
        }
    }

    fn finish(&self, stat: Stat) -> Value {
        if self.count == 0 && stat != Stat::Count {
            return Value::Null;
        }
        match stat {
            Stat::Count => Value::from(self.count),
            Stat::Min => self.min.clone().map(Value::Number).unwrap_or(Value::Null),
            Stat::Max => self.max.clone().map(Value::Number).unwrap_or(Value::Null),
            Stat::Sum if self.all_int => match i64::try_from(self.int_sum) {
                Ok(i) => Value::from(i),
                Err(_) => float(self.int_sum as f64),
            },
            Stat::Sum => float(self.float_sum),
            Stat::Mean if self.all_int => float(self.int_sum as f64 / self.count as f64),
            Stat::Mean => float(self.float_sum / self.count as f64),
        }
    }
}

fn float(f: f64) -> Value {
    Number::from_f64(f).map(Value::Number).unwrap_or(Value::Null)
}

/// Window start and group key to the group values and one accumulator per value column.
type Groups = BTreeMap<(Timestamp, Vec<String>), (Vec<Value>, Vec<Acc>)>;

/// One row per (window, group): the window start, group keys, then the
/// chosen statistic of every value column. Null cells are ignored.
fn window_stats(_: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String> {
    let input = table_input(inputs, "table")?;
    let time_name = str_param(params, "time_column")?;
    let time_col = column(input, time_name)?;
    let window = Window::parse(str_param(params, "window")?)?;
    let stat = Stat::parse(str_param(params, "stat")?)?;
    let group_names = list_param(params, "group_by")?;
    let value_names = list_param(params, "value_columns")?;
    if value_names.is_empty() {
        return Err("value_columns names no columns".into());
    }
    let group_cols = group_names
        .iter()
        .map(|c| column(input, c))
        .collect::<Result<Vec<_>, _>>()?;
    let value_cols = value_names
        .iter()
        .map(|c| column(input, c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut groups: Groups = BTreeMap::new();
    for row in &input.rows {
        let bucket = window.start(timestamp_cell(&row[time_col], time_name)?);
        let key_values: Vec<Value> = group_cols.iter().map(|&c| row[c].clone()).collect();
        let key = key_values.iter().map(Value::to_string).collect();
        let (_, accs) = groups
            .entry((bucket, key))
            .or_insert_with(|| (key_values, value_cols.iter().map(|_| Acc::new()).collect()));
        for (acc, (&c, name)) in accs.iter_mut().zip(value_cols.iter().zip(&value_names)) {
            match &row[c] {
                Value::Null => {}
                Value::Number(n) => acc.push(n),
                _ if stat == Stat::Count => acc.count += 1,
                other => return Err(format!("column `{name}`: `{other}` is not numeric")),
            }
        }
    }

    let mut out = Table::new(
        std::iter::once(str_param(params, "window_column")?.to_string())
            .chain(group_names.iter().cloned())
            .chain(value_names.iter().cloned())
            .collect(),
    );
    for ((bucket, _), (key_values, accs)) in groups {
        let mut row = vec![Value::from(bucket.to_string())];
        row.extend(key_values);
        row.extend(accs.iter().map(|a| a.finish(stat)));
        out.rows.push(row);
    }
    Ok(single(out))
}

/// Replaces each timestamp with the start of its window.
fn resample(_: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String> {
    let mut table = table_input(inputs, "table")?.clone();
    let name = str_param(params, "time_column")?;
    let col = column(&table, name)?;
    let window = Window::parse(str_param(params, "window")?)?;
    for row in &mut table.rows {
        let t = timestamp_cell(&row[col], name)?;
        row[col] = Value::from(window.start(t).to_string());
    }
    Ok(single(table))
}

/// Inner join on the key columns. Right-hand columns whose names clash with
/// left-hand ones get a `_right` suffix.
fn join(_: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String> {
    let left = table_input(inputs, "left")?;
    let right = table_input(inputs, "right")?;
    let keys = list_param(params, "keys")?;
    if keys.is_empty() {
        return Err("keys names no columns".into());
    }
    let left_keys = keys.iter().map(|k| column(left, k)).collect::<Result<Vec<_>, _>>()?;
    let right_keys = keys.iter().map(|k| column(right, k)).collect::<Result<Vec<_>, _>>()?;
    let right_rest: Vec<usize> = (0..right.columns.len()).filter(|i| !right_keys.contains(i)).collect();

    let mut columns = left.columns.clone();
    for &i in &right_rest {
        let name = &right.columns[i];
        let mut renamed = if columns.contains(name) {
            format!("{name}_right")
        } else {
            name.clone()
        };
        while columns.contains(&renamed) {
            renamed.push_str("_right");
        }
        columns.push(renamed);
    }

    let key_of = |row: &[Value], cols: &[usize]| -> Vec<String> { cols.iter().map(|&c| row[c].to_string()).collect() };
    let mut index: BTreeMap<Vec<String>, Vec<&Vec<Value>>> = BTreeMap::new();
    for row in &right.rows {
        index.entry(key_of(row, &right_keys)).or_default().push(row);
    }
    let mut out = Table::new(columns);
    for row in &left.rows {
        for matched in index.get(&key_of(row, &left_keys)).into_iter().flatten() {
            let mut joined = row.clone();
            joined.extend(right_rest.iter().map(|&i| matched[i].clone()));
            out.rows.push(joined);
        }
    }
    Ok(single(out))
}

/// Adds a boolean column comparing a numeric column against a threshold.
fn threshold_flag(_: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String> {
    let mut table = table_input(inputs, "table")?.clone();
    let name = str_param(params, "column")?;
    let col = column(&table, name)?;
    let threshold = params
        .get("threshold")
        .and_then(Value::as_f64)
        .ok_or("parameter `threshold` must be a number")?;
    let op: fn(f64, f64) -> bool = match str_param(params, "op")? {
        "gt" => |a, b| a > b,
        "ge" => |a, b| a >= b,
        "lt" => |a, b| a < b,
        "le" => |a, b| a <= b,
        "eq" => |a, b| a == b,
        other => return Err(format!("unknown op `{other}`")),
    };
    let output = str_param(params, "output_column")?.to_string();
    if table.column_index(&output).is_some() {
        return Err(format!("column `{output}` already exists"));
    }
    table.columns.push(output);
    for row in &mut table.rows {
        let flag = match &row[col] {
            Value::Null => Value::Null,
            Value::Number(n) => Value::from(op(n.as_f64().unwrap_or(f64::NAN), threshold)),
            other => return Err(format!("column `{name}`: `{other}` is not numeric")),
        };
        row.push(flag);
    }
    Ok(single(table))
}

/// Projects and renames: `"src:dst,src2"` keeps `src` as `dst` and `src2` as is.
fn select_columns(_: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String> {
    let input = table_input(inputs, "table")?;
    let mut picks = Vec::new();
    for spec in list_param(params, "columns")? {
        let (src, dst) = spec.split_once(':').unwrap_or((&spec, &spec));
        let (src, dst) = (src.trim(), dst.trim());
        if dst.is_empty() {
            return Err(format!("`{spec}` has an empty target name"));
        }
        picks.push((column(input, src)?, dst.to_string()));
    }
    if picks.is_empty() {
        return Err("columns names no columns".into());
    }
    let names: Vec<String> = picks.iter().map(|(_, d)| d.clone()).collect();
    if let Some(dup) = names.iter().enumerate().find(|(i, n)| names[..*i].contains(n)) {
        return Err(format!("column `{}` selected twice", dup.1));
    }
    let mut out = Table::new(names);
    out.rows = input
        .rows
        .iter()
        .map(|row| picks.iter().map(|(i, _)| row[*i].clone()).collect())
        .collect();
    Ok(single(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Datastore, StoreOptions};

    fn table(columns: &[&str], rows: Vec<Vec<Value>>) -> Table {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows,
        }
    }

    fn run(node: &str, inputs: Inputs, params: &[(&str, Value)]) -> Result<Table, String> {
        let dir = tempfile::tempdir().unwrap();
        let store = Datastore::open(dir.path(), StoreOptions::default()).unwrap();
        let ctx = NodeContext::new(&store, "s1");
        let (manifest, logic) = builtins().into_iter().find(|(m, _)| m.node_id == node).unwrap();
        let mut p: Params = manifest
            .parameters
            .iter()
            .filter_map(|p| p.default.clone().map(|d| (p.name.clone(), d)))
            .collect();
        p.extend(params.iter().map(|(k, v)| (k.to_string(), v.clone())));
        match logic.run(&ctx, &inputs, &p)?.remove("table") {
            Some(Artifact::Table(t)) => Ok(t),
            _ => panic!("no table output"),
        }
    }

    fn one(t: Table) -> Inputs {
        BTreeMap::from([("table".to_string(), Artifact::Table(t))])
    }

    #[test]
    fn registry_holds_all_builtins() {
        assert_eq!(builtin_registry().manifests().len(), 6);
    }

    #[test]
    fn daily_mean_by_group() {
        let t = table(
            &["capture_time", "pid", "hr"],
            vec![
                vec!["2024-03-01T01:00:00Z".into(), "a".into(), 60.into()],
                vec!["2024-03-01T23:00:00Z".into(), "a".into(), 71.into()],
                vec!["2024-03-02T01:00:00Z".into(), "a".into(), 80.into()],
                vec!["2024-03-01T02:00:00Z".into(), "b".into(), Value::Null],
            ],
        );
        let out = run(
            "window_stats",
            one(t),
            &[("group_by", "pid".into()), ("value_columns", "hr".into())],
        )
        .unwrap();
        assert_eq!(out.columns, vec!["window_start", "pid", "hr"]);
        assert_eq!(
            out.rows,
            vec![
                vec!["2024-03-01T00:00:00Z".into(), "a".into(), 65.5.into()],
                vec!["2024-03-01T00:00:00Z".into(), "b".into(), Value::Null],
                vec!["2024-03-02T00:00:00Z".into(), "a".into(), 80.0.into()],
            ]
        );
    }

    #[test]
    fn integer_sums_stay_integers() {
        let t = table(
            &["capture_time", "n"],
            vec![
                vec!["2024-03-01T01:00:00Z".into(), 2.into()],
                vec!["2024-03-01T02:00:00Z".into(), 3.into()],
            ],
        );
        let out = run(
            "window_stats",
            one(t),
            &[
                ("value_columns", "n".into()),
                ("stat", "sum".into()),
                ("window", "hour".into()),
            ],
        )
        .unwrap();
        assert_eq!(out.rows[0][1], Value::from(2));
        assert_eq!(out.rows[1][0], Value::from("2024-03-01T02:00:00Z"));
    }

    #[test]
    fn join_suffixes_clashing_columns() {
        let l = table(
            &["k", "v"],
            vec![vec![1.into(), "x".into()], vec![2.into(), "y".into()]],
        );
        let r = table(&["k", "v"], vec![vec![1.into(), "z".into()]]);
        let inputs = BTreeMap::from([
            ("left".to_string(), Artifact::Table(l)),
            ("right".to_string(), Artifact::Table(r)),
        ]);
        let out = run("join", inputs, &[("keys", "k".into())]).unwrap();
        assert_eq!(out.columns, vec!["k", "v", "v_right"]);
        assert_eq!(out.rows, vec![vec![Value::from(1), "x".into(), "z".into()]]);
    }

    #[test]
    fn threshold_and_select() {
        let t = table(
            &["a", "b"],
            vec![vec![5.into(), "p".into()], vec![Value::Null, "q".into()]],
        );
        let flagged = run(
            "threshold_flag",
            one(t),
            &[("column", "a".into()), ("threshold", 4.5.into())],
        )
        .unwrap();
        assert_eq!(flagged.rows[0][2], Value::from(true));
        assert_eq!(flagged.rows[1][2], Value::Null);
        let picked = run("select_columns", one(flagged), &[("columns", "flag:high, b".into())]).unwrap();
        assert_eq!(picked.columns, vec!["high", "b"]);
        assert!(run("select_columns", one(picked), &[("columns", "zzz".into())]).is_err());
    }

    #[test]
    fn resample_aligns_to_hour() {
        let t = table(&["capture_time"], vec![vec!["2024-03-01T01:59:59Z".into()]]);
        let out = run("resample", one(t), &[]).unwrap();
        assert_eq!(out.rows[0][0], Value::from("2024-03-01T01:00:00Z"));
    }
}
