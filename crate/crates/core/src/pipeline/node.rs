//! Reusable node manifests and the registry that maps them to logic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::ident::is_snake_identifier;
use crate::store::Datastore;
use crate::table::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortKind {
    Table,
    Blob,
    Scalar,
}

impl fmt::Display for PortKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PortKind::Table => "table",
            PortKind::Blob => "blob",
            PortKind::Scalar => "scalar",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Port {
    pub name: String,
    pub kind: PortKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Integer,
    Float,
    Boolean,
}

impl ParamKind {
    pub fn admits(&self, value: &Value) -> bool {
        match self {
            ParamKind::String => value.is_string(),
            ParamKind::Integer => value.is_i64() || value.is_u64(),
            ParamKind::Float => value.is_number(),
            ParamKind::Boolean => value.is_boolean(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    /// No default means the parameter must be assigned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeManifest {
    pub node_id: String,
    pub version: String,
    pub entrypoint: String,
    #[serde(default)]
    pub input_ports: Vec<Port>,
    #[serde(default)]
    pub output_ports: Vec<Port>,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    #[serde(default)]
    pub env_requirements: Vec<String>,
}

impl NodeManifest {
    pub fn input(&self, name: &str) -> Option<&Port> {
        self.input_ports.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&Port> {
        self.output_ports.iter().find(|p| p.name == name)
    }

    pub fn parameter(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn reference(&self) -> NodeRef {
        NodeRef {
            node_id: self.node_id.clone(),
            version: self.version.clone(),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if !is_snake_identifier(&self.node_id) {
            return Err(format!("node_id `{}` is not a snake-case identifier", self.node_id));
        }
        if !is_semver(&self.version) {
            return Err(format!("version `{}` is not MAJOR.MINOR.PATCH", self.version));
        }
        if self.entrypoint.trim().is_empty() {
            return Err("entrypoint must not be empty".into());
        }
        for (side, ports) in [("input", &self.input_ports), ("output", &self.output_ports)] {
            let mut seen = BTreeSet::new();
            for port in ports {
                if !is_snake_identifier(&port.name) {
                    return Err(format!("{side} port `{}` is not a snake-case identifier", port.name));
                }
                if !seen.insert(&port.name) {
                    return Err(format!("duplicate {side} port `{}`", port.name));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for param in &self.parameters {
            if !is_snake_identifier(&param.name) {
                return Err(format!("parameter `{}` is not a snake-case identifier", param.name));
            }
            if !seen.insert(&param.name) {
                return Err(format!("duplicate parameter `{}`", param.name));
            }
            if let Some(default) = &param.default {
                if !param.kind.admits(default) {
                    return Err(format!("default of `{}` does not match its kind", param.name));
                }
            }
        }
        Ok(())
    }
}

fn is_semver(v: &str) -> bool {
    let parts: Vec<&str> = v.split('.').collect();
    parts.len() == 3
        && parts
            .iter()
            .all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()) && (p.len() == 1 || !p.starts_with('0')))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub node_id: String,
    pub version: String,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.node_id, self.version)
    }
}

/// Data flowing between nodes.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Table(Table),
    Blob(Vec<u8>),
    Scalar(Value),
}

impl Artifact {
    pub fn kind(&self) -> PortKind {
        match self {
            Artifact::Table(_) => PortKind::Table,
            Artifact::Blob(_) => PortKind::Blob,
            Artifact::Scalar(_) => PortKind::Scalar,
        }
    }
}

/// What a node may see of the outside world while it runs.
pub struct NodeContext<'a> {
    pub store: &'a Datastore,
    pub study_id: &'a str,
    consumed: Mutex<BTreeSet<String>>,
}

impl<'a> NodeContext<'a> {
    pub fn new(store: &'a Datastore, study_id: &'a str) -> Self {
        NodeContext {
            store,
            study_id,
            consumed: Mutex::new(BTreeSet::new()),
        }
    }

    /// Marks metadata entries as inputs of this run.
    pub fn note_consumed(&self, entry_ids: impl IntoIterator<Item = String>) {
        self.consumed.lock().unwrap().extend(entry_ids);
    }

    pub fn consumed(&self) -> Vec<String> {
        self.consumed.lock().unwrap().iter().cloned().collect()
    }
}

pub type Inputs = BTreeMap<String, Artifact>;
pub type Outputs = BTreeMap<String, Artifact>;
pub type Params = BTreeMap<String, Value>;

/// Node behaviour: a deterministic function of inputs and parameters.
pub trait NodeLogic: Send + Sync {
    fn run(&self, ctx: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String>;
}

impl<F> NodeLogic for F
where
    F: Fn(&NodeContext<'_>, &Inputs, &Params) -> Result<Outputs, String> + Send + Sync,
{
    fn run(&self, ctx: &NodeContext<'_>, inputs: &Inputs, params: &Params) -> Result<Outputs, String> {
        self(ctx, inputs, params)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("INVALID_MANIFEST: {0}")]
    InvalidManifest(String),
    #[error("CONFLICT: {0} is already registered with a different manifest")]
    Conflict(NodeRef),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::InvalidManifest(_) => "INVALID_MANIFEST",
            RegistryError::Conflict(_) => "CONFLICT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registration {
    Registered,
    /// The identical manifest was already registered; logic is unchanged.
    AlreadyRegistered,
}

#[derive(Clone)]
pub struct RegisteredNode {
    pub manifest: NodeManifest,
    pub logic: Arc<dyn NodeLogic>,
}

#[derive(Default)]
pub struct NodeRegistry {
    nodes: RwLock<BTreeMap<NodeRef, RegisteredNode>>,
}

impl NodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, manifest: NodeManifest, logic: Arc<dyn NodeLogic>) -> Result<Registration, RegistryError> {
        manifest.check().map_err(RegistryError::InvalidManifest)?;
        let key = manifest.reference();
        let mut nodes = self.nodes.write().unwrap();
        if let Some(existing) = nodes.get(&key) {
            return if existing.manifest == manifest {
                Ok(Registration::AlreadyRegistered)
            } else {
                Err(RegistryError::Conflict(key))
            };
        }
        nodes.insert(key, RegisteredNode { manifest, logic });
        Ok(Registration::Registered)
    }

    pub fn get(&self, node: &NodeRef) -> Option<RegisteredNode> {
        self.nodes.read().unwrap().get(node).cloned()
    }

    pub fn manifests(&self) -> Vec<NodeManifest> {
        self.nodes
            .read()
            .unwrap()
            .values()
            .map(|n| n.manifest.clone())
            .collect()
    }
}
