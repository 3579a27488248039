//! Shared fixtures for the integration tests: a generic test node, random
//! graph and pipeline generators, and brute-force graph oracles.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use fabric_core::journal::Durability;
use fabric_core::model::{parse_schema, TermStatus, VocabularyTerm};
use fabric_core::pipeline::{
    Artifact, Edge, Inputs, NodeContext, NodeInstance, NodeManifest, NodeRegistry, OutputBinding, Outputs, ParamKind,
    ParamSpec, Params, PipelineSpec, Port, PortKind, PortRef,
};
use fabric_core::table::Table;
use fabric_core::time::Timestamp;
use fabric_core::Fabric;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;

pub const HUB_INPUTS: usize = 12;

pub fn ts(s: &str) -> Timestamp {
    Timestamp::parse(s).unwrap()
}

/// `hub@1.0.0`: up to twelve table inputs, one table output holding a single
/// `value` column whose row count is one plus the input rows.
pub fn hub_manifest() -> NodeManifest {
    NodeManifest {
        node_id: "hub".into(),
        version: "1.0.0".into(),
        entrypoint: "test:hub".into(),
        input_ports: (0..HUB_INPUTS)
            .map(|i| Port {
                name: format!("in{i}"),
                kind: PortKind::Table,
            })
            .collect(),
        output_ports: vec![Port {
            name: "out".into(),
            kind: PortKind::Table,
        }],
        parameters: vec![
            ParamSpec {
                name: "fail".into(),
                kind: ParamKind::Boolean,
                default: Some(Value::Bool(false)),
            },
            ParamSpec {
                name: "label".into(),
                kind: ParamKind::String,
                default: Some(Value::from("")),
            },
            ParamSpec {
                name: "weight".into(),
                kind: ParamKind::Float,
                default: Some(Value::from(1.0)),
            },
            ParamSpec {
                name: "count".into(),
                kind: ParamKind::Integer,
                default: Some(Value::from(0)),
            },
            ParamSpec {
                name: "column".into(),
                kind: ParamKind::String,
                default: Some(Value::from("value")),
            },
        ],
        env_requirements: vec![],
    }
}

fn hub(_: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String> {
    if params["fail"] == Value::Bool(true) {
        return Err("configured to fail".into());
    }
    let upstream: usize = inputs
        .values()
        .map(|a| match a {
            Artifact::Table(t) => t.len(),
            _ => 0,
        })
        .sum();
    let mut table = Table::new(vec![params["column"].as_str().unwrap().to_string()]);
    for i in 0..=upstream {
        table.rows.push(vec![Value::from(i as i64)]);
    }
    Ok(BTreeMap::from([("out".to_string(), Artifact::Table(table))]))
}

pub fn hub_registry() -> NodeRegistry {
    let reg = NodeRegistry::new();
    reg.register(hub_manifest(), Arc::new(hub)).unwrap();
    reg
}

/// A hub registry plus `flaky@1.0.0`, which fails its first call and `boom@1.0.0`, which panics.
pub fn hub_registry_with_misfits() -> (NodeRegistry, Arc<AtomicU32>) {
    let reg = hub_registry();
    let calls = Arc::new(AtomicU32::new(0));
    let mut flaky = hub_manifest();
    flaky.node_id = "flaky".into();
    let counter = Arc::clone(&calls);
    reg.register(
        flaky,
        Arc::new(move |ctx: &NodeContext<'_>, inputs: &Inputs, params: &Params| {
            if counter.fetch_add(1, Ordering::SeqCst) == 0 {
                Err("transient".to_string())
            } else {
                hub(ctx, inputs, params)
            }
        }),
    )
    .unwrap();
    let mut boom = hub_manifest();
    boom.node_id = "boom".into();
    reg.register(
        boom,
        Arc::new(|_: &NodeContext<'_>, _: &Inputs, _: &Params| -> Result<Outputs, String> { panic!("kaboom") }),
    )
    .unwrap();
    (reg, calls)
}

/// A fabric whose catalog holds `hub_code@v1`: one integer `value` column
/// bound to an accepted term.
pub fn hub_fabric(dir: &std::path::Path) -> Fabric {
    let fabric = Fabric::open(dir, Durability::Buffered).unwrap();
    fabric
        .vocabulary
        .register(VocabularyTerm {
            canonical_name: "hub_value".into(),
            definition: "test value".into(),
            kind: fabric_core::model::FieldKind::Integer,
            unit: None,
            aliases: vec![],
            status: TermStatus::Proposed,
            proposed_by: "tests".into(),
            proposed_at: ts("2024-01-01T00:00:00Z"),
            decision: None,
        })
        .unwrap();
    fabric
        .vocabulary
        .accept("hub_value", "ops", ts("2024-01-01T00:00:00Z"))
        .unwrap();
    let schema = parse_schema(
        r#"{"schema_id":"hub_code","version":1,"kind":"code","pipeline_id":"hub",
            "fields":[{"name":"value","kind":"integer","required":true}],
            "vocabulary_bindings":{"value":"hub_value"}}"#,
    )
    .unwrap();
    fabric.schemas.publish(schema, &fabric.vocabulary).unwrap();
    fabric
}

/// Directed graph on `n` nodes, each ordered pair (self-loops included)
/// present with probability `density`.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize, density: f64) -> (usize, Vec<(usize, usize)>) {
    let n = rng.gen_range(1..=max_nodes);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if rng.gen_bool(density) {
                edges.push((u, v));
            }
        }
    }
    (n, edges)
}

/// Random DAG: edges only go from lower to higher position in a random permutation.
pub fn random_dag(rng: &mut impl Rng, max_nodes: usize, density: f64) -> (usize, Vec<(usize, usize)>) {
    let n = rng.gen_range(1..=max_nodes);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(density) {
                edges.push((order[i], order[j]));
            }
        }
    }
    (n, edges)
}

pub fn node_name(i: usize) -> String {
    format!("n{i}")
}

/// Hub pipeline for a graph: edge `u -> v` wires `n{u}.out` into `n{v}.in{u}`.
pub fn graph_pipeline(n: usize, edges: &[(usize, usize)]) -> PipelineSpec {
    PipelineSpec {
        pipeline_id: "graph".into(),
        version: 1,
        nodes: (0..n)
            .map(|i| NodeInstance {
                id: node_name(i),
                node: "hub".into(),
                version: "1.0.0".into(),
                parameters: BTreeMap::new(),
            })
            .collect(),
        edges: edges
            .iter()
            .map(|&(u, v)| Edge {
                from: PortRef::new(&node_name(u), "out"),
                to: PortRef::new(&node_name(v), &format!("in{u}")),
            })
            .collect(),
        output_binding: vec![OutputBinding {
            port: PortRef::new(&node_name(0), "out"),
            code_schema: fabric_core::model::SchemaRef::new("hub_code", 1),
            dataset_id: "graph_out".into(),
        }],
    }
}

/// Transitive closure by Warshall's algorithm.
pub fn closure(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut reach = vec![vec![false; n]; n];
    for &(u, v) in edges {
        reach[u][v] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}

/// A graph is cyclic iff some node reaches itself.
pub fn has_cycle_brute_force(n: usize, edges: &[(usize, usize)]) -> bool {
    let reach = closure(n, edges);
    (0..n).any(|i| reach[i][i])
}

fn random_value(rng: &mut impl Rng, kind: ParamKind) -> Value {
    match kind {
        ParamKind::Boolean => Value::Bool(false),
        ParamKind::String => {
            let words = ["alpha", "beta gamma", "", "ünïcode", "quote\"d", "a,b:c"];
            Value::from(*words.choose(rng).unwrap())
        }
        ParamKind::Float => Value::from(rng.gen_range(-1e6..1e6f64)),
        ParamKind::Integer => Value::from(rng.gen_range(-1000i64..1000)),
    }
}

/// A random valid hub pipeline: shuffled instance ids, random parameter
/// assignments and one to three bound outputs.
pub fn random_valid_pipeline(rng: &mut impl Rng) -> PipelineSpec {
    let (n, edges) = random_dag(rng, 10, 0.3);
    let mut spec = graph_pipeline(n, &edges);
    spec.pipeline_id = format!("rand_{}", rng.gen_range(0..10_000));
    spec.version = rng.gen_range(1..5);
    let manifest = hub_manifest();
    for node in &mut spec.nodes {
        for p in &manifest.parameters {
            if rng.gen_bool(0.5) {
                node.parameters.insert(p.name.clone(), random_value(rng, p.kind));
            }
        }
    }
    spec.nodes.shuffle(rng);
    spec.edges.shuffle(rng);
    let bound = rng.gen_range(1..=n.min(3));
    let mut picks: Vec<usize> = (0..n).collect();
    picks.shuffle(rng);
    spec.output_binding = picks[..bound]
        .iter()
        .map(|&i| OutputBinding {
            port: PortRef::new(&node_name(i), "out"),
            code_schema: fabric_core::model::SchemaRef::new("hub_code", 1),
            dataset_id: format!("ds_{i}"),
        })
        .collect();
    spec
}
