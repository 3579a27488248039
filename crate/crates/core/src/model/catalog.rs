//! Published schema catalog.
//!
//! Schemas are stored as canonical documents at
//! `{root}/{schema_id}/v{version}.json`. A published `(schema_id, version)`
//! never changes; new content needs the next version number.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use super::schema::{check_code_invariants, parse_schema, CideSchema, CodeSchema, Schema, SchemaError, SchemaRef};
use super::validate::{validate_output, ValidationReport};
use super::vocab::VocabularyRegistry;
use crate::fsutil::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("VERSION_CONFLICT: {0} is already published with different content")]
    VersionConflict(SchemaRef),
    #[error("VERSION_GAP: {schema_id} must be published as version {expected}, got {got}")]
    VersionGap { schema_id: String, expected: u32, got: u32 },
    #[error("VOCABULARY_VIOLATION: code schema {schema} does not satisfy the vocabulary ({} violations)", report.violations.len())]
    Vocabulary {
        schema: SchemaRef,
        report: ValidationReport,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("SCHEMA_NOT_FOUND: {0}")]
    NotFound(String),
    #[error("catalog I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl CatalogError {
    pub fn code(&self) -> &'static str {
        match self {
            CatalogError::VersionConflict(_) => "VERSION_CONFLICT",
            CatalogError::VersionGap { .. } => "VERSION_GAP",
            CatalogError::Vocabulary { .. } => "VOCABULARY_VIOLATION",
            CatalogError::Schema(e) => e.code(),
            CatalogError::NotFound(_) => "SCHEMA_NOT_FOUND",
            CatalogError::Io(_) => "STORAGE_IO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishOutcome {
    Published,
    /// Identical content was already published under the same version.
    AlreadyPublished,
}

pub struct SchemaCatalog {
    root: Option<PathBuf>,
    schemas: RwLock<BTreeMap<SchemaRef, Schema>>,
}

impl SchemaCatalog {
    pub fn in_memory() -> Self {
        SchemaCatalog {
            root: None,
            schemas: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn open(root: &Path) -> Result<Self, CatalogError> {
        fs::create_dir_all(root)?;
        let mut schemas = BTreeMap::new();
        for dir in fs::read_dir(root)? {
            let dir = dir?;
            if !dir.file_type()?.is_dir() {
                continue;
            }
            for file in fs::read_dir(dir.path())? {
                let path = file?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let schema = parse_schema(&fs::read_to_string(&path)?)?;
                schemas.insert(schema.schema_ref(), schema);
            }
        }
        Ok(SchemaCatalog {
            root: Some(root.to_path_buf()),
            schemas: RwLock::new(schemas),
        })
    }

    /// Publishes a schema. CODE schemas must also satisfy the vocabulary:
    /// every binding resolves to an accepted term of matching kind and unit.
    pub fn publish(&self, schema: Schema, registry: &VocabularyRegistry) -> Result<PublishOutcome, CatalogError> {
        if let Schema::Code(code) = &schema {
            check_code_invariants(code)?;
            let report = validate_output(&code.schema_ref().to_string(), &[], code, registry);
            if !report.is_valid() {
                return Err(CatalogError::Vocabulary {
                    schema: code.schema_ref(),
                    report,
                });
            }
        }
        let key = schema.schema_ref();
        let mut schemas = self.schemas.write().unwrap();
        if let Some(existing) = schemas.get(&key) {
            return if existing.to_document() == schema.to_document() {
                Ok(PublishOutcome::AlreadyPublished)
            } else {
                Err(CatalogError::VersionConflict(key))
            };
        }
        let latest = schemas
            .keys()
            .filter(|r| r.schema_id == key.schema_id)
            .map(|r| r.version)
            .max()
            .unwrap_or(0);
        if key.version != latest + 1 {
            return Err(CatalogError::VersionGap {
                schema_id: key.schema_id,
                expected: latest + 1,
                got: key.version,
            });
        }
        if let Some(root) = &self.root {
            let path = root.join(&key.schema_id).join(format!("v{}.json", key.version));
            write_atomic(&path, schema.to_document().as_bytes())?;
        }
        schemas.insert(key, schema);
        Ok(PublishOutcome::Published)
    }

    pub fn get(&self, schema_ref: &SchemaRef) -> Option<Schema> {
        self.schemas.read().unwrap().get(schema_ref).cloned()
    }

    /// Latest published CIDE schema governing `task_id`.
    pub fn cide_for_task(&self, task_id: &str) -> Option<CideSchema> {
        self.schemas
            .read()
            .unwrap()
            .values()
            .filter_map(|s| match s {
                Schema::Cide(c) if c.task_id == task_id => Some(c),
                _ => None,
            })
            .max_by_key(|c| (c.version, c.schema_id.clone()))
            .cloned()
    }

    pub fn code(&self, schema_ref: &SchemaRef) -> Result<CodeSchema, CatalogError> {
        match self.get(schema_ref) {
            Some(Schema::Code(c)) => Ok(c),
            _ => Err(CatalogError::NotFound(format!("code schema {schema_ref}"))),
        }
    }

    pub fn list(&self) -> Vec<SchemaRef> {
        self.schemas.read().unwrap().keys().cloned().collect()
    }
}
