//! The opened fabric: datastore, schema catalog and vocabulary under one root.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;

use crate::journal::Durability;
use crate::model::{CatalogError, Schema, SchemaCatalog, VocabError, VocabularyRegistry};
use crate::store::{AuditReport, Datastore, StoreError, StoreOptions};

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Vocabulary(#[from] VocabError),
}

impl OpenError {
    pub fn code(&self) -> &'static str {
        match self {
            OpenError::Store(e) => e.code(),
            OpenError::Catalog(e) => e.code(),
            OpenError::Vocabulary(e) => e.code(),
        }
    }
}

pub struct Fabric {
    pub store: Datastore,
    pub schemas: SchemaCatalog,
    pub vocabulary: VocabularyRegistry,
}

impl Fabric {
    /// Opens (creating if needed) a fabric rooted at `root`:
    /// the datastore layout plus `schemas/` and `vocabulary.ledger`.
    pub fn open(root: &Path, durability: Durability) -> Result<Fabric, OpenError> {
        let store = Datastore::open(root, StoreOptions { durability })?;
        let schemas = SchemaCatalog::open(&root.join("schemas"))?;
        let vocabulary = VocabularyRegistry::open(&root.join("vocabulary.ledger"), durability)?;
        Ok(Fabric {
            store,
            schemas,
            vocabulary,
        })
    }

    /// Full-scan audit. String values of fields marked sensitive in the
    /// entries' CIDE schemas are scanned for alongside participant ids.
    pub fn audit(&self) -> AuditReport {
        let mut needles = BTreeSet::new();
        for entry in self.store.query_metadata(&Default::default()) {
            let Some(Schema::Cide(schema)) = self.schemas.get(&entry.schema_ref) else {
                continue;
            };
            for field in schema.fields.iter().filter(|f| f.sensitive) {
                if let Some(Value::String(s)) = entry.inline_fields.get(&field.name) {
                    needles.insert(s.clone());
                }
            }
        }
        self.store.audit(&needles)
    }
}
