//! Pipeline documents and their structural validation.
//!
//! ```json
//! {
//!   "pipeline_id": "sleep_daily",
//!   "version": 1,
//!   "nodes": [
//!     {"id": "source", "node": "store_source", "version": "1.0.0",
//!      "parameters": {"task_id": "sleep_survey"}}
//!   ],
//!   "edges": [{"from": "source.table", "to": "daily.table"}],
//!   "output_binding": [
//!     {"port": "code.table", "code_schema": {"schema_id": "sleep_daily_code", "version": 1},
//!      "dataset_id": "sleep_daily"}
//!   ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use super::node::{NodeManifest, NodeRef, NodeRegistry, PortKind};
use super::plan::find_cycle;
use crate::model::ident::{is_identifier, is_snake_identifier};
use crate::model::SchemaRef;

/// `instance.port`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRef {
    pub instance: String,
    pub port: String,
}

impl PortRef {
    pub fn new(instance: &str, port: &str) -> Self {
        PortRef {
            instance: instance.to_string(),
            port: port.to_string(),
        }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.instance, self.port)
    }
}

impl FromStr for PortRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('.') {
            Some((i, p)) if is_snake_identifier(i) && is_snake_identifier(p) => Ok(PortRef::new(i, p)),
            _ => Err(format!("`{s}` is not of the form instance.port")),
        }
    }
}

impl Serialize for PortRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeInstance {
    pub id: String,
    pub node: String,
    pub version: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, Value>,
}

impl NodeInstance {
    pub fn node_ref(&self) -> NodeRef {
        NodeRef {
            node_id: self.node.clone(),
            version: self.version.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: PortRef,
    pub to: PortRef,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBinding {
    pub port: PortRef,
    pub code_schema: SchemaRef,
    pub dataset_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub pipeline_id: String,
    pub version: u32,
    pub nodes: Vec<NodeInstance>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub output_binding: Vec<OutputBinding>,
}

impl PipelineSpec {
    pub fn instance(&self, id: &str) -> Option<&NodeInstance> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Same pipeline with nodes, edges and bindings in sorted order.
    pub fn canonical(&self) -> PipelineSpec {
        let mut p = self.clone();
        p.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        p.edges.sort();
        p.output_binding.sort();
        p
    }

    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("pipeline serializes");
        s.push('\n');
        s
    }

    /// Instance-level dependency edges (deduplicated).
    pub fn dependencies(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .map(|e| (e.from.instance.clone(), e.to.instance.clone()))
            .collect()
    }

    pub fn instance_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("PARSE_ERROR at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("UNKNOWN_NODE: instance `{instance}` references unregistered node {node}")]
    UnknownNode { instance: String, node: NodeRef },
    #[error("CYCLE_DETECTED: {}", cycle.join(" -> "))]
    CycleDetected { cycle: Vec<String> },
    #[error("PORT_KIND_MISMATCH: {from} ({from_kind}) -> {to} ({to_kind})")]
    PortKindMismatch {
        from: String,
        from_kind: PortKind,
        to: String,
        to_kind: PortKind,
    },
    #[error("UNBOUND_OUTPUT: {0}")]
    UnboundOutput(String),
    #[error("INVALID_PIPELINE: {0}")]
    Invalid(String),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Parse { .. } => "PARSE_ERROR",
            PipelineError::UnknownNode { .. } => "UNKNOWN_NODE",
            PipelineError::CycleDetected { .. } => "CYCLE_DETECTED",
            PipelineError::PortKindMismatch { .. } => "PORT_KIND_MISMATCH",
            PipelineError::UnboundOutput(_) => "UNBOUND_OUTPUT",
            PipelineError::Invalid(_) => "INVALID_PIPELINE",
        }
    }
}

/// Parses a pipeline document and verifies it against the node registry.
pub fn load_pipeline(document: &str, registry: &NodeRegistry) -> Result<PipelineSpec, PipelineError> {
    let spec: PipelineSpec = serde_json::from_str(document).map_err(|e| PipelineError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    verify_pipeline(&spec, registry)?;
    Ok(spec)
}

/// Checks every pipeline invariant; diagnostics name the offending node or edge.
pub fn verify_pipeline(spec: &PipelineSpec, registry: &NodeRegistry) -> Result<(), PipelineError> {
    let invalid = |m: String| Err(PipelineError::Invalid(m));
    if !is_identifier(&spec.pipeline_id) {
        return invalid(format!("pipeline_id `{}` is not a valid identifier", spec.pipeline_id));
    }
    if spec.version == 0 {
        return invalid("version must be a positive integer".into());
    }
    if spec.nodes.is_empty() {
        return invalid("pipeline has no nodes".into());
    }
    let mut manifests: BTreeMap<&str, NodeManifest> = BTreeMap::new();
    for inst in &spec.nodes {
        if !is_snake_identifier(&inst.id) {
            return invalid(format!("instance id `{}` is not a snake-case identifier", inst.id));
        }
        let Some(node) = registry.get(&inst.node_ref()) else {
            return Err(PipelineError::UnknownNode {
                instance: inst.id.clone(),
                node: inst.node_ref(),
            });
        };
        if manifests.insert(&inst.id, node.manifest.clone()).is_some() {
            return invalid(format!("duplicate instance id `{}`", inst.id));
        }
        let manifest = &manifests[inst.id.as_str()];
        for (name, value) in &inst.parameters {
            match manifest.parameter(name) {
                None => return invalid(format!("instance `{}`: unknown parameter `{name}`", inst.id)),
                Some(p) if !p.kind.admits(value) => {
                    return invalid(format!(
                        "instance `{}`: parameter `{name}` expects {:?}, got {value}",
                        inst.id, p.kind
                    ))
                }
                Some(_) => {}
            }
        }
        for p in &manifest.parameters {
            if p.default.is_none() && !inst.parameters.contains_key(&p.name) {
                return invalid(format!(
                    "instance `{}`: required parameter `{}` is not assigned",
                    inst.id, p.name
                ));
            }
        }
    }

    let mut fed = BTreeSet::new();
    for edge in &spec.edges {
        let from_kind = output_kind(&manifests, &edge.from)?;
        let Some(to_manifest) = manifests.get(edge.to.instance.as_str()) else {
            return invalid(format!(
                "edge {} -> {}: unknown instance `{}`",
                edge.from, edge.to, edge.to.instance
            ));
        };
        let Some(to_port) = to_manifest.input(&edge.to.port) else {
            return invalid(format!(
                "edge {} -> {}: `{}` has no input port `{}`",
                edge.from, edge.to, edge.to.instance, edge.to.port
            ));
        };
        if from_kind != to_port.kind {
            return Err(PipelineError::PortKindMismatch {
                from: edge.from.to_string(),
                from_kind,
                to: edge.to.to_string(),
                to_kind: to_port.kind,
            });
        }
        if !fed.insert(&edge.to) {
            return invalid(format!("input {} has more than one incoming edge", edge.to));
        }
    }

    if let Some(cycle) = find_cycle(&spec.instance_ids(), &spec.dependencies()) {
        return Err(PipelineError::CycleDetected { cycle });
    }

    if spec.output_binding.is_empty() {
        return Err(PipelineError::UnboundOutput(
            "at least one output must be bound to a CODE schema".into(),
        ));
    }
    let mut datasets = BTreeSet::new();
    for binding in &spec.output_binding {
        let kind = output_kind(&manifests, &binding.port)
            .map_err(|_| PipelineError::UnboundOutput(format!("binding names unknown output {}", binding.port)))?;
        if kind != PortKind::Table {
            return Err(PipelineError::PortKindMismatch {
                from: binding.port.to_string(),
                from_kind: kind,
                to: binding.code_schema.to_string(),
                to_kind: PortKind::Table,
            });
        }
        if !is_identifier(&binding.dataset_id) {
            return invalid(format!("dataset_id `{}` is not a valid identifier", binding.dataset_id));
        }
        if !datasets.insert(&binding.dataset_id) {
            return invalid(format!("dataset_id `{}` is bound twice", binding.dataset_id));
        }
    }
    Ok(())
}

fn output_kind(manifests: &BTreeMap<&str, NodeManifest>, port: &PortRef) -> Result<PortKind, PipelineError> {
    let manifest = manifests
        .get(port.instance.as_str())
        .ok_or_else(|| PipelineError::Invalid(format!("{port}: unknown instance `{}`", port.instance)))?;
    manifest.output(&port.port).map(|p| p.kind).ok_or_else(|| {
        PipelineError::Invalid(format!(
            "{port}: `{}` has no output port `{}`",
            port.instance, port.port
        ))
    })
}
