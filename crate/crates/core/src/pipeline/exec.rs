//! Local execution of a planned pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::discovery::{emit_discovery_metadata, RunInfo};
use super::node::{Artifact, Inputs, NodeContext, NodeRegistry, Params};
use super::plan::Plan;
use super::spec::{PipelineSpec, PortRef};
use crate::fabric::Fabric;
use crate::model::{validate_output, ValidationReport, Violation, ViolationCode};
use crate::store::{BlobRef, CodeValidationRecord, KeyHint, PublishRequest, StoreError};
use crate::time::{Clock, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRun {
    pub status: NodeStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunOutcome {
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    /// NODE_FAILURE, CODE_VALIDATION_FAILED or DATASET_CONFLICT.
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedDataset {
    pub environment: String,
    pub dataset_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub pipeline_id: String,
    pub pipeline_version: u32,
    pub environment: String,
    pub study_id: String,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub nodes: BTreeMap<String, NodeRun>,
    /// `instance.port` -> stored artifact
    pub artifacts: BTreeMap<String, BlobRef>,
    /// `instance.port` -> CODE validation of that bound output
    pub code_validation: BTreeMap<String, ValidationReport>,
    /// `instance.port` -> emitted discovery sidecar
    pub discovery_metadata_ref: BTreeMap<String, BlobRef>,
    pub published: Vec<PublishedDataset>,
    pub outcome: RunOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RunFailure>,
}

impl RunRecord {
    /// The record with run id and timestamps blanked, for comparing runs.
    pub fn without_identity(&self) -> RunRecord {
        let epoch = Timestamp::from_unix_seconds(0).unwrap();
        let mut r = self.clone();
        r.run_id.clear();
        r.started_at = epoch;
        r.finished_at = epoch;
        r.discovery_metadata_ref.clear();
        r
    }
}

pub struct ExecuteContext<'a> {
    pub fabric: &'a Fabric,
    pub nodes: &'a NodeRegistry,
    pub environment: &'a str,
    pub study_id: &'a str,
    /// `instance.parameter` -> value, applied over the pipeline's assignments.
    pub overrides: BTreeMap<String, Value>,
    /// Replaces the bound dataset id; only valid for single-output pipelines.
    pub dataset_id: Option<String>,
    pub clock: &'a dyn Clock,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("INVALID_OVERRIDE: {0}")]
    InvalidOverride(String),
}

impl ExecError {
    pub fn code(&self) -> &'static str {
        match self {
            ExecError::Store(e) => e.code(),
            ExecError::InvalidOverride(_) => "INVALID_OVERRIDE",
        }
    }
}

const MAX_ATTEMPTS: u32 = 2;

/// Runs the plan stage by stage. Node failures and CODE gate failures are
/// reported in the returned record; only storage problems are errors.
pub fn execute(pipeline: &PipelineSpec, plan: &Plan, ctx: &ExecuteContext<'_>) -> Result<RunRecord, ExecError> {
    let params = resolve_params(pipeline, ctx)?;
    let store = &ctx.fabric.store;
    let started_at = ctx.clock.now();
    let run_id = format!("run-{}-{:04}", pipeline.pipeline_id, store.run_count() + 1);
    let node_ctx = NodeContext::new(store, ctx.study_id);

    let mut nodes: BTreeMap<String, NodeRun> = pipeline
        .nodes
        .iter()
        .map(|n| {
            (
                n.id.clone(),
                NodeRun {
                    status: NodeStatus::Pending,
                    attempts: 0,
                    error: None,
                },
            )
        })
        .collect();
    let mut values: BTreeMap<PortRef, Artifact> = BTreeMap::new();
    let mut artifacts = BTreeMap::new();
    let mut failure = None;

    for stage in &plan.stages {
        for instance_id in stage {
            if nodes[instance_id].status == NodeStatus::Skipped {
                continue;
            }
            let instance = pipeline.instance(instance_id).expect("planned instance exists");
            let registered = ctx
                .nodes
                .get(&instance.node_ref())
                .expect("verified pipelines reference registered nodes");
            let inputs: Inputs = pipeline
                .edges
                .iter()
                .filter(|e| e.to.instance == *instance_id)
                .filter_map(|e| values.get(&e.from).map(|a| (e.to.port.clone(), a.clone())))
                .collect();
            let run = nodes.get_mut(instance_id).unwrap();
            run.status = NodeStatus::Running;
            let mut result = Err(String::new());
            while run.attempts < MAX_ATTEMPTS {
                run.attempts += 1;
                result = catch_unwind(AssertUnwindSafe(|| {
                    registered.logic.run(&node_ctx, &inputs, &params[instance_id])
                }))
                .unwrap_or_else(|panic| Err(panic_message(panic)))
                .and_then(|outputs| check_outputs(&registered.manifest, outputs));
                if result.is_ok() {
                    break;
                }
                tracing::warn!(instance = %instance_id, attempt = run.attempts, "node attempt failed");
            }
            match result {
                Ok(outputs) => {
                    run.status = NodeStatus::Succeeded;
                    for (port, artifact) in outputs {
                        let port_ref = PortRef::new(instance_id, &port);
                        if let Some(blob) = persist_artifact(ctx, pipeline, &port_ref, &artifact)? {
                            artifacts.insert(port_ref.to_string(), blob);
                        }
                        values.insert(port_ref, artifact);
                    }
                }
                Err(message) => {
                    run.status = NodeStatus::Failed;
                    run.error = Some(message.clone());
                    failure.get_or_insert(RunFailure {
                        code: "NODE_FAILURE".into(),
                        message: format!("{instance_id}: {message}"),
                    });
                    for successor in transitive_successors(pipeline, instance_id) {
                        nodes.get_mut(&successor).unwrap().status = NodeStatus::Skipped;
                    }
                }
            }
        }
    }

    let all_nodes_ok = nodes.values().all(|n| n.status == NodeStatus::Succeeded);
    let mut code_validation = BTreeMap::new();
    let mut discovery_metadata_ref = BTreeMap::new();
    let mut published = Vec::new();
    let mut gated = Vec::new();
    for binding in &pipeline.output_binding {
        let Some(Artifact::Table(table)) = values.get(&binding.port) else {
            continue;
        };
        let dataset_id = ctx.dataset_id.clone().unwrap_or_else(|| binding.dataset_id.clone());
        let report = match ctx.fabric.schemas.code(&binding.code_schema) {
            Ok(schema) => validate_output(&dataset_id, &table.row_maps(), &schema, &ctx.fabric.vocabulary),
            Err(_) => ValidationReport::from_violations(
                &dataset_id,
                vec![Violation::new(
                    &binding.port.to_string(),
                    ViolationCode::SchemaNotFound,
                    format!("CODE schema {} is not published", binding.code_schema),
                )],
            ),
        };
        store.record_code_validation(CodeValidationRecord::new(
            &run_id,
            &binding.code_schema,
            table,
            report.clone(),
        ))?;
        if !report.is_valid() && failure.is_none() {
            failure = Some(RunFailure {
                code: "CODE_VALIDATION_FAILED".into(),
                message: format!("{} violates {}", binding.port, binding.code_schema),
            });
        }
        code_validation.insert(binding.port.to_string(), report);
        gated.push((binding, dataset_id, table));
    }

    if all_nodes_ok && failure.is_none() {
        let generated_at = ctx.clock.now();
        let info = RunInfo {
            run_id: &run_id,
            pipeline_id: &pipeline.pipeline_id,
            pipeline_version: pipeline.version,
            environment: ctx.environment,
            study_id: ctx.study_id,
            generated_at,
        };
        let source_entries = node_ctx.consumed();
        for (binding, dataset_id, table) in gated {
            let schema = ctx
                .fabric
                .schemas
                .code(&binding.code_schema)
                .expect("validated outputs have a published schema");
            let sidecar = emit_discovery_metadata(&info, &dataset_id, &schema, table).to_document();
            let sidecar_ref = store.put_object(
                sidecar.as_bytes(),
                "application/json",
                &KeyHint::Sidecar {
                    environment: ctx.environment.to_string(),
                    dataset_id: dataset_id.clone(),
                },
            )?;
            let publish = store.publish_outbound(&PublishRequest {
                dataset_id: &dataset_id,
                environment: ctx.environment,
                study_id: ctx.study_id,
                code_schema_ref: &binding.code_schema,
                rows: table,
                run_id: &run_id,
                sidecar: sidecar.as_bytes(),
                generated_at,
                source_entries: &source_entries,
            });
            match publish {
                Ok(_) => {
                    discovery_metadata_ref.insert(binding.port.to_string(), sidecar_ref);
                    published.push(PublishedDataset {
                        environment: ctx.environment.to_string(),
                        dataset_id,
                    });
                }
                Err(e) if e.is_io() => return Err(e.into()),
                Err(e) => {
                    failure = Some(RunFailure {
                        code: e.code().to_string(),
                        message: e.to_string(),
                    });
                    break;
                }
            }
        }
    }

    let outcome = if all_nodes_ok && failure.is_none() {
        RunOutcome::Succeeded
    } else {
        RunOutcome::Failed
    };
    let record = RunRecord {
        run_id,
        pipeline_id: pipeline.pipeline_id.clone(),
        pipeline_version: pipeline.version,
        environment: ctx.environment.to_string(),
        study_id: ctx.study_id.to_string(),
        started_at,
        finished_at: ctx.clock.now(),
        nodes,
        artifacts,
        code_validation,
        discovery_metadata_ref,
        published,
        outcome,
        failure,
    };
    store.record_run(record.clone())?;
    Ok(record)
}

fn resolve_params(pipeline: &PipelineSpec, ctx: &ExecuteContext<'_>) -> Result<BTreeMap<String, Params>, ExecError> {
    if ctx.dataset_id.is_some() && pipeline.output_binding.len() != 1 {
        return Err(ExecError::InvalidOverride(
            "a dataset id override needs exactly one bound output".into(),
        ));
    }
    let mut all = BTreeMap::new();
    for inst in &pipeline.nodes {
        let manifest = ctx
            .nodes
            .get(&inst.node_ref())
            .expect("verified pipelines reference registered nodes")
            .manifest;
        let mut params: Params = manifest
            .parameters
            .iter()
            .filter_map(|p| p.default.clone().map(|d| (p.name.clone(), d)))
            .collect();
        params.extend(inst.parameters.clone());
        all.insert(inst.id.clone(), (params, manifest));
    }
    for (key, value) in &ctx.overrides {
        let (instance, name) = key
            .split_once('.')
            .ok_or_else(|| ExecError::InvalidOverride(format!("`{key}` is not instance.parameter")))?;
        let (params, manifest) = all
            .get_mut(instance)
            .ok_or_else(|| ExecError::InvalidOverride(format!("unknown instance `{instance}`")))?;
        let spec = manifest
            .parameter(name)
            .ok_or_else(|| ExecError::InvalidOverride(format!("`{instance}` has no parameter `{name}`")))?;
        if !spec.kind.admits(value) {
            return Err(ExecError::InvalidOverride(format!("`{key}` expects {:?}", spec.kind)));
        }
        params.insert(name.to_string(), value.clone());
    }
    Ok(all.into_iter().map(|(k, (p, _))| (k, p)).collect())
}

fn check_outputs(
    manifest: &super::node::NodeManifest,
    outputs: BTreeMap<String, Artifact>,
) -> Result<BTreeMap<String, Artifact>, String> {
    for port in &manifest.output_ports {
        match outputs.get(&port.name) {
            None => return Err(format!("node produced no `{}` output", port.name)),
            Some(a) if a.kind() != port.kind => {
                return Err(format!(
                    "output `{}` is {} but the port is {}",
                    port.name,
                    a.kind(),
                    port.kind
                ))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = outputs.keys().find(|k| manifest.output(k).is_none()) {
        return Err(format!("node produced undeclared output `{extra}`"));
    }
    Ok(outputs)
}

fn persist_artifact(
    ctx: &ExecuteContext<'_>,
    pipeline: &PipelineSpec,
    port: &PortRef,
    artifact: &Artifact,
) -> Result<Option<BlobRef>, StoreError> {
    let (bytes, content_type) = match artifact {
        Artifact::Table(t) => (t.to_csv(), "text/csv"),
        Artifact::Blob(b) => (b.clone(), "application/octet-stream"),
        Artifact::Scalar(v) => (v.to_string().into_bytes(), "application/json"),
    };
    if bytes.is_empty() {
        return Ok(None);
    }
    let hint = KeyHint::Artifact {
        pipeline_id: pipeline.pipeline_id.clone(),
        instance: port.instance.clone(),
        port: port.port.clone(),
    };
    ctx.fabric.store.put_object(&bytes, content_type, &hint).map(Some)
}

/// Every instance reachable from `failed` along edges, excluding itself.
pub fn transitive_successors(pipeline: &PipelineSpec, failed: &str) -> BTreeSet<String> {
    let deps = pipeline.dependencies();
    let mut seen = BTreeSet::new();
    let mut frontier = vec![failed.to_string()];
    while let Some(n) = frontier.pop() {
        for (_, to) in deps.iter().filter(|(from, _)| *from == n) {
            if seen.insert(to.clone()) {
                frontier.push(to.clone());
            }
        }
    }
    seen.remove(failed);
    seen
}

fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("node panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("node panicked: {s}")
    } else {
        "node panicked".into()
    }
}
