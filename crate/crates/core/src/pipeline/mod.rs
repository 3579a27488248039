//! Pipelines: versioned node manifests wired into DAGs, planned into
//! stages, executed locally and gated on CODE validation before publishing.

pub mod builtin;
pub mod discovery;
pub mod exec;
pub mod export;
pub mod node;
pub mod plan;
pub mod spec;

pub use builtin::builtin_registry;
pub use discovery::{emit_discovery_metadata, DatasetField, DiscoveryMetadata, PipelineVersion, RunInfo, TimeCoverage};
pub use exec::{
    execute, transitive_successors, ExecError, ExecuteContext, NodeRun, NodeStatus, PublishedDataset, RunFailure,
    RunOutcome, RunRecord,
};
pub use export::{export, import, ExportDocument};
pub use node::{
    Artifact, Inputs, NodeContext, NodeLogic, NodeManifest, NodeRef, NodeRegistry, Outputs, ParamKind, ParamSpec,
    Params, Port, PortKind, Registration, RegistryError,
};
pub use plan::{plan, Plan};
pub use spec::{
    load_pipeline, verify_pipeline, Edge, NodeInstance, OutputBinding, PipelineError, PipelineSpec, PortRef,
};
