//! Engine-neutral DAG document for handing a pipeline to an external
//! workflow engine adapter.

use serde::{Deserialize, Serialize};

use super::spec::{Edge, NodeInstance, OutputBinding, PipelineError, PipelineSpec, PortRef};
use crate::model::SchemaRef;

pub const GENERIC_DAG: &str = "generic-dag";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportTask {
    pub id: String,
    pub node: String,
    pub node_version: String,
    pub parameters: std::collections::BTreeMap<String, serde_json::Value>,
    /// Filled in by the engine adapter.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportDep {
    pub upstream: String,
    pub downstream: String,
    pub upstream_port: String,
    pub downstream_port: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportOutput {
    pub task: String,
    pub port: String,
    pub code_schema: SchemaRef,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportDocument {
    pub format: String,
    pub pipeline_id: String,
    pub version: u32,
    pub tasks: Vec<ExportTask>,
    pub deps: Vec<ExportDep>,
    pub outputs: Vec<ExportOutput>,
}

impl ExportDocument {
    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("export serializes");
        s.push('\n');
        s
    }
}

pub fn image_placeholder(node: &str, version: &str) -> String {
    format!("${{IMAGE:{node}:{version}}}")
}

pub fn export(pipeline: &PipelineSpec) -> ExportDocument {
    let p = pipeline.canonical();
    ExportDocument {
        format: GENERIC_DAG.to_string(),
        pipeline_id: p.pipeline_id.clone(),
        version: p.version,
        tasks: p
            .nodes
            .iter()
            .map(|n| ExportTask {
                id: n.id.clone(),
                node: n.node.clone(),
                node_version: n.version.clone(),
                parameters: n.parameters.clone(),
                image: image_placeholder(&n.node, &n.version),
            })
            .collect(),
        deps: p
            .edges
            .iter()
            .map(|e| ExportDep {
                upstream: e.from.instance.clone(),
                downstream: e.to.instance.clone(),
                upstream_port: e.from.port.clone(),
                downstream_port: e.to.port.clone(),
            })
            .collect(),
        outputs: p
            .output_binding
            .iter()
            .map(|b| ExportOutput {
                task: b.port.instance.clone(),
                port: b.port.port.clone(),
                code_schema: b.code_schema.clone(),
                dataset_id: b.dataset_id.clone(),
            })
            .collect(),
    }
}

/// Parses an export document back into a pipeline in canonical form.
/// Structural only; run `verify_pipeline` before executing the result.
pub fn import(document: &str) -> Result<PipelineSpec, PipelineError> {
    let doc: ExportDocument = serde_json::from_str(document).map_err(|e| PipelineError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.format != GENERIC_DAG {
        return Err(PipelineError::Invalid(format!(
            "unsupported export format `{}`",
            doc.format
        )));
    }
    let spec = PipelineSpec {
        pipeline_id: doc.pipeline_id,
        version: doc.version,
        nodes: doc
            .tasks
            .into_iter()
            .map(|t| NodeInstance {
                id: t.id,
                node: t.node,
                version: t.node_version,
                parameters: t.parameters,
            })
            .collect(),
        edges: doc
            .deps
            .into_iter()
            .map(|d| Edge {
                from: PortRef::new(&d.upstream, &d.upstream_port),
                to: PortRef::new(&d.downstream, &d.downstream_port),
            })
            .collect(),
        output_binding: doc
            .outputs
            .into_iter()
            .map(|o| OutputBinding {
                port: PortRef::new(&o.task, &o.port),
                code_schema: o.code_schema,
                dataset_id: o.dataset_id,
            })
            .collect(),
    };
    Ok(spec.canonical())
}
