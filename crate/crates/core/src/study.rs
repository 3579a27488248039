//! The reference home-monitoring study: task schemas, the daily sleep
//! pipeline, its CODE schema and the vocabulary it binds to.
//!
//! The definitions live as plain JSON files under `study/` in this crate.

use crate::fabric::Fabric;
use crate::model::{
    parse_schema, parse_term_proposals, CatalogError, CideSchema, CodeSchema, Schema, TermStatus, VocabError,
    VocabularyTerm,
};
use crate::pipeline::{load_pipeline, NodeRegistry, PipelineError, PipelineSpec};
use crate::time::Timestamp;

pub const BED_SENSOR: &str = "bed_sensor";
pub const MOTION_SENSOR: &str = "motion_sensor";
pub const SLEEP_SURVEY: &str = "sleep_survey";
pub const COGNITIVE_TASK: &str = "cognitive_task";
pub const SLEEP_DAILY_DATASET: &str = "sleep_daily";

pub const SCHEMA_DOCUMENTS: [(&str, &str); 5] = [
    ("bed_sensor.json", include_str!("../study/schemas/bed_sensor.json")),
    (
        "motion_sensor.json",
        include_str!("../study/schemas/motion_sensor.json"),
    ),
    ("sleep_survey.json", include_str!("../study/schemas/sleep_survey.json")),
    (
        "cognitive_task.json",
        include_str!("../study/schemas/cognitive_task.json"),
    ),
    (
        "sleep_daily_code.json",
        include_str!("../study/schemas/sleep_daily_code.json"),
    ),
];
pub const PIPELINE_DOCUMENT: &str = include_str!("../study/sleep_daily.pipeline.json");
pub const VOCABULARY_DOCUMENT: &str = include_str!("../study/vocabulary.json");

pub fn schemas() -> Vec<Schema> {
    SCHEMA_DOCUMENTS
        .iter()
        .map(|(name, doc)| parse_schema(doc).unwrap_or_else(|e| panic!("{name}: {e}")))
        .collect()
}

pub fn cide_schemas() -> Vec<CideSchema> {
    schemas()
        .into_iter()
        .filter_map(|s| match s {
            Schema::Cide(c) => Some(c),
            Schema::Code(_) => None,
        })
        .collect()
}

pub fn cide_schema(task_id: &str) -> Option<CideSchema> {
    cide_schemas().into_iter().find(|s| s.task_id == task_id)
}

pub fn code_schema() -> CodeSchema {
    schemas()
        .into_iter()
        .find_map(|s| match s {
            Schema::Code(c) => Some(c),
            Schema::Cide(_) => None,
        })
        .expect("study defines a CODE schema")
}

/// Vocabulary proposals for every term the CODE schema binds.
pub fn vocabulary_terms(proposed_by: &str, at: Timestamp) -> Vec<VocabularyTerm> {
    parse_term_proposals(VOCABULARY_DOCUMENT)
        .expect("study vocabulary parses")
        .into_iter()
        .map(|p| p.into_term(proposed_by, at))
        .collect()
}

pub fn pipeline(nodes: &NodeRegistry) -> Result<PipelineSpec, PipelineError> {
    load_pipeline(PIPELINE_DOCUMENT, nodes)
}

#[derive(Debug, thiserror::Error)]
pub enum InstallError {
    #[error(transparent)]
    Vocabulary(#[from] VocabError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

impl InstallError {
    pub fn code(&self) -> &'static str {
        match self {
            InstallError::Vocabulary(e) => e.code(),
            InstallError::Catalog(e) => e.code(),
        }
    }
}

/// Proposes and accepts the study vocabulary, then publishes every schema.
/// Safe to repeat: existing terms and identical schemas are left alone.
pub fn install(fabric: &Fabric, actor: &str, at: Timestamp) -> Result<(), InstallError> {
    for term in vocabulary_terms(actor, at) {
        let name = term.canonical_name.clone();
        let existing = match fabric.vocabulary.resolve(&name) {
            Ok(t) => t,
            Err(VocabError::NotFound(_)) => {
                fabric.vocabulary.register(term)?;
                fabric.vocabulary.resolve(&name)?
            }
            Err(e) => return Err(e.into()),
        };
        if existing.status == TermStatus::Proposed {
            fabric.vocabulary.accept(&name, actor, at)?;
        }
    }
    for schema in schemas() {
        fabric.schemas.publish(schema, &fabric.vocabulary)?;
    }
    Ok(())
}
