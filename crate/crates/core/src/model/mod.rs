//! Common data model: CIDE/CODE schemas, the shared vocabulary and the
//! validation engine every other module gates on.

pub mod catalog;
pub mod ident;
pub mod schema;
pub mod validate;
pub mod vocab;

pub use catalog::{CatalogError, PublishOutcome, SchemaCatalog};
pub use schema::{
    parse_schema, CideSchema, CodeSchema, Constraints, FieldKind, FieldSpec, Schema, SchemaError, SchemaRef,
};
pub use validate::{
    validate_output, validate_record, Outcome, ValidationReport, Violation, ViolationCode, ENVELOPE_FIELD,
};
pub use vocab::{
    parse_term_proposals, ConflictReason, RegistrationOutcome, TermDecision, TermProposal, TermStatus, VocabError,
    VocabularyRegistry, VocabularyTerm,
};
