mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use fabric_core::model::SchemaRef;
use fabric_core::pipeline::{
    execute, export, import, load_pipeline, plan, verify_pipeline, Edge, ExecuteContext, NodeContext, NodeRegistry,
    NodeStatus, Outputs, Params, PipelineSpec, PortKind, PortRef, RunOutcome,
};
use fabric_core::time::SteppingClock;
use fabric_core::Fabric;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use support::*;

fn doc(v: Value) -> String {
    serde_json::to_string(&v).unwrap()
}

fn hub_node(id: &str, params: Value) -> Value {
    json!({"id": id, "node": "hub", "version": "1.0.0", "parameters": params})
}

fn binding(port: &str) -> Value {
    json!([{"port": port, "code_schema": {"schema_id": "hub_code", "version": 1}, "dataset_id": "out"}])
}

#[test]
fn linear_pipeline_loads() {
    let d = doc(json!({
        "pipeline_id": "lin", "version": 1,
        "nodes": [hub_node("a", json!({})), hub_node("b", json!({"label": "x"}))],
        "edges": [{"from": "a.out", "to": "b.in0"}],
        "output_binding": binding("b.out"),
    }));
    let p = load_pipeline(&d, &hub_registry()).unwrap();
    assert_eq!(p.nodes.len(), 2);
}

#[test]
fn two_node_cycle_detected() {
    let d = doc(json!({
        "pipeline_id": "cyc", "version": 1,
        "nodes": [hub_node("a", json!({})), hub_node("b", json!({}))],
        "edges": [{"from": "a.out", "to": "b.in0"}, {"from": "b.out", "to": "a.in0"}],
        "output_binding": binding("b.out"),
    }));
    let err = load_pipeline(&d, &hub_registry()).unwrap_err();
    assert_eq!(err.code(), "CYCLE_DETECTED");
    assert!(err.to_string().contains("a -> b -> a"), "{err}");
}

#[test]
fn table_to_blob_is_a_kind_mismatch() {
    let reg = hub_registry();
    let mut sink = hub_manifest();
    sink.node_id = "blob_sink".into();
    sink.input_ports[0].kind = PortKind::Blob;
    reg.register(
        sink,
        Arc::new(|_: &NodeContext<'_>, _: &fabric_core::pipeline::Inputs, _: &Params| Ok(Outputs::new())),
    )
    .unwrap();
    let d = doc(json!({
        "pipeline_id": "kinds", "version": 1,
        "nodes": [hub_node("a", json!({})),
                  {"id": "b", "node": "blob_sink", "version": "1.0.0"}],
        "edges": [{"from": "a.out", "to": "b.in0"}],
        "output_binding": binding("a.out"),
    }));
    let err = load_pipeline(&d, &reg).unwrap_err();
    assert_eq!(err.code(), "PORT_KIND_MISMATCH");
    assert!(err.to_string().contains("a.out") && err.to_string().contains("b.in0"));
}

#[test]
fn other_load_errors() {
    let reg = hub_registry();
    let no_binding = doc(json!({"pipeline_id": "p", "version": 1, "nodes": [hub_node("a", json!({}))]}));
    assert_eq!(load_pipeline(&no_binding, &reg).unwrap_err().code(), "UNBOUND_OUTPUT");
    let unknown = doc(json!({
        "pipeline_id": "p", "version": 1,
        "nodes": [{"id": "a", "node": "hub", "version": "9.9.9"}],
        "output_binding": binding("a.out"),
    }));
    assert_eq!(load_pipeline(&unknown, &reg).unwrap_err().code(), "UNKNOWN_NODE");
    let err = load_pipeline("{\n  \"pipeline_id\": ", &reg).unwrap_err();
    assert_eq!(err.code(), "PARSE_ERROR");
    let bad_param = doc(json!({
        "pipeline_id": "p", "version": 1,
        "nodes": [hub_node("a", json!({"fail": "yes"}))],
        "output_binding": binding("a.out"),
    }));
    assert!(load_pipeline(&bad_param, &reg).unwrap_err().to_string().contains("`a`"));
}

/// Every topological order of a small DAG, by filtering all permutations.
fn topological_orders(nodes: &[&str], edges: &[(&str, &str)]) -> Vec<Vec<String>> {
    fn permute(rest: &mut Vec<String>, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            prefix.push(x);
            permute(rest, prefix, out);
            let x = prefix.pop().unwrap();
            rest.insert(i, x);
        }
    }
    let mut all = Vec::new();
    permute(
        &mut nodes.iter().map(|s| s.to_string()).collect(),
        &mut vec![],
        &mut all,
    );
    all.into_iter()
        .filter(|order| {
            edges
                .iter()
                .all(|(u, v)| order.iter().position(|x| x == u) < order.iter().position(|x| x == v))
        })
        .collect()
}

#[test]
fn diamond_plan_matches_enumerated_orders() {
    let nodes = ["a", "b", "c", "d"];
    let edges = [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")];
    let spec = PipelineSpec {
        pipeline_id: "diamond".into(),
        version: 1,
        nodes: nodes
            .iter()
            .map(|n| serde_json::from_value(hub_node(n, json!({}))).unwrap())
            .collect(),
        edges: edges
            .iter()
            .enumerate()
            .map(|(i, (u, v))| Edge {
                from: PortRef::new(u, "out"),
                to: PortRef::new(v, &format!("in{i}")),
            })
            .collect(),
        output_binding: serde_json::from_value(binding("d.out")).unwrap(),
    };
    verify_pipeline(&spec, &hub_registry()).unwrap();
    let stages = plan(&spec).stages;

    // Group nodes by their earliest position over all valid orders.
    let orders = topological_orders(&nodes, &edges);
    assert_eq!(orders.len(), 2);
    let mut earliest: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for n in nodes {
        let pos = orders
            .iter()
            .map(|o| o.iter().position(|x| x == n).unwrap())
            .min()
            .unwrap();
        earliest.entry(pos).or_default().push(n.to_string());
    }
    let expected: Vec<Vec<String>> = earliest.into_values().collect();
    assert_eq!(stages, expected);
    assert_eq!(stages, vec![vec!["a"], vec!["b", "c"], vec!["d"]]);
}

#[test]
fn single_and_chain_plans() {
    let single = graph_pipeline(1, &[]);
    assert_eq!(plan(&single).stages, vec![vec!["n0"]]);
    let chain = graph_pipeline(3, &[(0, 1), (1, 2)]);
    assert_eq!(plan(&chain).stages, vec![vec!["n0"], vec!["n1"], vec!["n2"]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn cycle_verdict_matches_reachability(seed in any::<u64>(), density in 0.02f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, edges) = random_graph(&mut rng, 12, density);
        let spec = graph_pipeline(n, &edges);
        let verdict = verify_pipeline(&spec, &hub_registry());
        let cyclic = has_cycle_brute_force(n, &edges);
        prop_assert_eq!(verdict.as_ref().err().map(|e| e.code()), cyclic.then_some("CYCLE_DETECTED"));
        if !cyclic {
            let p = plan(&spec);
            let mut seen: Vec<String> = p.stages.iter().flatten().cloned().collect();
            seen.sort();
            let mut all = spec.instance_ids();
            all.sort();
            prop_assert_eq!(seen, all);
            for (u, v) in &edges {
                prop_assert!(p.stage_of(&node_name(*u)) < p.stage_of(&node_name(*v)));
            }
        }
    }

    #[test]
    fn export_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_valid_pipeline(&mut rng);
        verify_pipeline(&spec, &hub_registry()).unwrap();
        let document = export(&spec).to_document();
        prop_assert_eq!(import(&document).unwrap(), spec.canonical());
    }
}

#[test]
fn diamond_export_structure_and_parameters() {
    let mut spec = graph_pipeline(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]);
    spec.nodes[1].parameters.insert("weight".into(), json!(0.125));
    spec.nodes[1].parameters.insert("label".into(), json!("walk, \"fast\""));
    let exported = export(&spec);
    assert_eq!(exported.tasks.len(), 4);
    assert_eq!(exported.deps.len(), 4);
    let n1 = exported.tasks.iter().find(|t| t.id == "n1").unwrap();
    assert_eq!(n1.parameters, spec.nodes[1].parameters);
    assert!(n1.image.contains("hub"));
    assert!(exported.to_document().contains(r#""label": "walk, \"fast\"""#));
}

fn run_pipeline(fabric: &Fabric, nodes: &NodeRegistry, spec: &PipelineSpec) -> fabric_core::pipeline::RunRecord {
    let clock = SteppingClock::starting_at(ts("2024-03-10T00:00:00Z"));
    let ctx = ExecuteContext {
        fabric,
        nodes,
        environment: "research",
        study_id: "s1",
        overrides: BTreeMap::new(),
        dataset_id: None,
        clock: &clock,
    };
    execute(spec, &plan(spec), &ctx).unwrap()
}

#[test]
fn successful_run_publishes_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = hub_fabric(dir.path());
    let reg = hub_registry();
    let spec = graph_pipeline(3, &[(1, 0), (2, 0)]);
    let run = run_pipeline(&fabric, &reg, &spec);
    assert_eq!(run.outcome, RunOutcome::Succeeded, "{:?}", run.failure);
    assert!(run
        .nodes
        .values()
        .all(|n| n.status == NodeStatus::Succeeded && n.attempts == 1));
    assert_eq!(run.artifacts.len(), 3);
    assert!(run.code_validation["n0.out"].is_valid());
    assert_eq!(run.discovery_metadata_ref.len(), 1);
    let manifest = fabric.store.manifest("research", "graph_out").unwrap();
    assert_eq!(manifest.row_count, 3);
    assert_eq!(manifest.run_id, run.run_id);
    assert_eq!(fabric.store.run(&run.run_id).unwrap(), run);
    assert!(fabric.audit().is_clean());
}

#[test]
fn failing_node_skips_successors_and_blocks_publish() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = hub_fabric(dir.path());
    let reg = hub_registry();
    let mut spec = graph_pipeline(3, &[(2, 1), (1, 0)]);
    spec.nodes[1].parameters.insert("fail".into(), json!(true));
    let run = run_pipeline(&fabric, &reg, &spec);
    assert_eq!(run.outcome, RunOutcome::Failed);
    assert_eq!(run.failure.as_ref().unwrap().code, "NODE_FAILURE");
    assert_eq!(run.nodes["n2"].status, NodeStatus::Succeeded);
    assert_eq!(run.nodes["n1"].status, NodeStatus::Failed);
    assert_eq!(run.nodes["n1"].attempts, 2);
    assert_eq!(run.nodes["n0"].status, NodeStatus::Skipped);
    assert!(fabric.store.manifests().is_empty());
    assert!(fabric.audit().is_clean());
}

#[test]
fn unbound_output_column_fails_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = hub_fabric(dir.path());
    let reg = hub_registry();
    let mut spec = graph_pipeline(1, &[]);
    spec.nodes[0].parameters.insert("column".into(), json!("mystery"));
    let run = run_pipeline(&fabric, &reg, &spec);
    assert_eq!(run.outcome, RunOutcome::Failed);
    assert_eq!(run.failure.as_ref().unwrap().code, "CODE_VALIDATION_FAILED");
    let report = &run.code_validation["n0.out"];
    assert!(report.has("mystery", fabric_core::model::ViolationCode::UnboundVocabulary));
    assert!(fabric.store.manifests().is_empty());
}

#[test]
fn missing_code_schema_fails_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = hub_fabric(dir.path());
    let mut spec = graph_pipeline(1, &[]);
    spec.output_binding[0].code_schema = SchemaRef::new("hub_code", 7);
    let run = run_pipeline(&fabric, &hub_registry(), &spec);
    assert_eq!(run.failure.unwrap().code, "CODE_VALIDATION_FAILED");
    assert!(run.code_validation["n0.out"].has("n0.out", fabric_core::model::ViolationCode::SchemaNotFound));
}

#[test]
fn transient_failure_is_retried_and_panics_are_contained() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = hub_fabric(dir.path());
    let (reg, calls) = hub_registry_with_misfits();
    let mut spec = graph_pipeline(2, &[(1, 0)]);
    spec.nodes[1].node = "flaky".into();
    let run = run_pipeline(&fabric, &reg, &spec);
    assert_eq!(run.outcome, RunOutcome::Succeeded);
    assert_eq!(run.nodes["n1"].attempts, 2);
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);

    let dir = tempfile::tempdir().unwrap();
    let fabric = hub_fabric(dir.path());
    spec.nodes[1].node = "boom".into();
    let run = run_pipeline(&fabric, &reg, &spec);
    assert_eq!(run.nodes["n1"].status, NodeStatus::Failed);
    assert!(run.nodes["n1"].error.as_deref().unwrap().contains("kaboom"));
    assert_eq!(run.nodes["n0"].status, NodeStatus::Skipped);
}

#[test]
fn overrides_apply_and_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let fabric = hub_fabric(dir.path());
    let reg = hub_registry();
    let spec = graph_pipeline(1, &[]);
    let clock = SteppingClock::starting_at(ts("2024-03-10T00:00:00Z"));
    let mut ctx = ExecuteContext {
        fabric: &fabric,
        nodes: &reg,
        environment: "research",
        study_id: "s1",
        overrides: BTreeMap::from([("n0.fail".to_string(), json!(true))]),
        dataset_id: Some("renamed".into()),
        clock: &clock,
    };
    let run = execute(&spec, &plan(&spec), &ctx).unwrap();
    assert_eq!(run.nodes["n0"].status, NodeStatus::Failed);
    ctx.overrides = BTreeMap::from([("n0.fail".to_string(), json!("no"))]);
    assert_eq!(
        execute(&spec, &plan(&spec), &ctx).unwrap_err().code(),
        "INVALID_OVERRIDE"
    );
    ctx.overrides.clear();
    let run = execute(&spec, &plan(&spec), &ctx).unwrap();
    assert_eq!(run.published[0].dataset_id, "renamed");
    assert_eq!(run.run_id, "run-graph-0002");
}

#[test]
fn reruns_are_deterministic() {
    let spec = graph_pipeline(4, &[(1, 0), (2, 0), (3, 1)]);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let fabric = hub_fabric(dir.path());
        let run = run_pipeline(&fabric, &hub_registry(), &spec);
        let manifest = fabric.store.manifest("research", "graph_out").unwrap();
        let (data, _) = fabric.store.read_outbound(&manifest).unwrap();
        outputs.push((data, run.without_identity()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn skipped_set_is_exactly_the_transitive_successors(seed in any::<u64>(), fail_mask in any::<u16>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, edges) = random_dag(&mut rng, 8, 0.35);
        let mut spec = graph_pipeline(n, &edges);
        let failing: BTreeSet<usize> = (0..n).filter(|i| fail_mask & (1 << i) != 0).collect();
        for &i in &failing {
            spec.nodes[i].parameters.insert("fail".into(), json!(true));
        }
        let dir = tempfile::tempdir().unwrap();
        let fabric = hub_fabric(dir.path());
        let run = run_pipeline(&fabric, &hub_registry(), &spec);

        let reach = closure(n, &edges);
        let expected_skipped: BTreeSet<String> = (0..n)
            .filter(|&v| failing.iter().any(|&f| reach[f][v]))
            .map(node_name)
            .collect();
        let expected_failed: BTreeSet<String> = failing
            .iter()
            .map(|&f| node_name(f))
            .filter(|f| !expected_skipped.contains(f))
            .collect();
        let with = |s: NodeStatus| -> BTreeSet<String> {
            run.nodes.iter().filter(|(_, r)| r.status == s).map(|(k, _)| k.clone()).collect()
        };
        prop_assert_eq!(with(NodeStatus::Skipped), expected_skipped);
        prop_assert_eq!(with(NodeStatus::Failed), expected_failed);
        prop_assert_eq!(run.outcome == RunOutcome::Succeeded, failing.is_empty());
        // Gate: a failed run never leaves a dataset behind.
        prop_assert_eq!(fabric.store.manifests().is_empty(), !failing.is_empty());
    }
}
