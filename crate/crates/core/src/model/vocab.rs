//! Shared vocabulary of canonical data-element names.
//!
//! Terms are introduced as `proposed` by any environment and become binding
//! for CODE outputs once an operator accepts them. The registry persists as a
//! ledger of register/accept/reject events and rebuilds its state by replay.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::ident::{is_identifier, is_snake_identifier};
use super::schema::{normalize_unit, FieldKind};
use crate::journal::{Durability, Journal, JournalError};
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermStatus {
    Proposed,
    Accepted,
    Rejected,
}

impl fmt::Display for TermStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TermStatus::Proposed => "proposed",
            TermStatus::Accepted => "accepted",
            TermStatus::Rejected => "rejected",
        })
    }
}

/// Who moved a term out of `proposed`, and when.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermDecision {
    pub actor: String,
    pub at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyTerm {
    pub canonical_name: String,
    pub definition: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub status: TermStatus,
    pub proposed_by: String,
    pub proposed_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<TermDecision>,
}

/// A term as an operator writes it in a proposal file.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermProposal {
    pub canonical_name: String,
    pub definition: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl TermProposal {
    pub fn into_term(self, proposed_by: &str, at: Timestamp) -> VocabularyTerm {
        VocabularyTerm {
            canonical_name: self.canonical_name,
            definition: self.definition,
            kind: self.kind,
            unit: self.unit,
            aliases: self.aliases,
            status: TermStatus::Proposed,
            proposed_by: proposed_by.to_string(),
            proposed_at: at,
            decision: None,
        }
    }
}

/// A proposal document holds one term object or a list of them.
pub fn parse_term_proposals(document: &str) -> Result<Vec<TermProposal>, VocabError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        One(TermProposal),
        Many(Vec<TermProposal>),
    }
    match serde_json::from_str::<Doc>(document) {
        Ok(Doc::One(p)) => Ok(vec![p]),
        Ok(Doc::Many(ps)) => Ok(ps),
        Err(e) => Err(VocabError::InvalidTerm(format!("proposal document: {e}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ConflictReason {
    /// A term with the same canonical name exists.
    NameTaken,
    KindMismatch {
        existing: FieldKind,
        proposed: FieldKind,
    },
    UnitMismatch {
        existing: Option<String>,
        proposed: Option<String>,
    },
    /// `name` (canonical or alias of the new term) is already used by `existing`.
    NameCollision {
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("CONFLICT: `{name}` collides with existing term `{existing}` ({reason:?})")]
    Conflict {
        name: String,
        existing: String,
        reason: ConflictReason,
    },
    #[error("NOT_FOUND: no term named `{0}`")]
    NotFound(String),
    #[error("INVALID_TRANSITION: term `{name}` is already {status}")]
    InvalidTransition { name: String, status: TermStatus },
    #[error("INVALID_TERM: {0}")]
    InvalidTerm(String),
    #[error("vocabulary ledger: {0}")]
    Ledger(String),
}

impl VocabError {
    pub fn code(&self) -> &'static str {
        match self {
            VocabError::Conflict { .. } => "CONFLICT",
            VocabError::NotFound(_) => "NOT_FOUND",
            VocabError::InvalidTransition { .. } => "INVALID_TRANSITION",
            VocabError::InvalidTerm(_) => "INVALID_TERM",
            VocabError::Ledger(_) => "LEDGER_IO",
        }
    }
}

impl From<JournalError> for VocabError {
    fn from(e: JournalError) -> Self {
        VocabError::Ledger(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegistrationOutcome {
    Proposed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum LedgerEvent {
    Register { term: VocabularyTerm },
    Accept { name: String, actor: String, at: Timestamp },
    Reject { name: String, actor: String, at: Timestamp },
}

#[derive(Default)]
struct State {
    terms: BTreeMap<String, VocabularyTerm>,
    /// canonical name or alias -> canonical name
    names: HashMap<String, String>,
}

impl State {
    fn check_register(&self, term: &VocabularyTerm) -> Result<(), VocabError> {
        if term.status != TermStatus::Proposed || term.decision.is_some() {
            return Err(VocabError::InvalidTerm(
                "new terms must be registered with status proposed".into(),
            ));
        }
        if !is_snake_identifier(&term.canonical_name) {
            return Err(VocabError::InvalidTerm(format!(
                "`{}` is not a valid term name",
                term.canonical_name
            )));
        }
        if !is_identifier(&term.proposed_by) {
            return Err(VocabError::InvalidTerm(format!(
                "`{}` is not a valid environment identifier",
                term.proposed_by
            )));
        }
        let mut own = BTreeSet::new();
        own.insert(term.canonical_name.as_str());
        for alias in &term.aliases {
            if !is_snake_identifier(alias) {
                return Err(VocabError::InvalidTerm(format!("`{alias}` is not a valid alias")));
            }
            if !own.insert(alias.as_str()) {
                return Err(VocabError::InvalidTerm(format!(
                    "`{alias}` appears twice among the term's own names"
                )));
            }
        }
        if let Some(existing) = self.terms.get(&term.canonical_name) {
            let reason = if existing.kind != term.kind {
                ConflictReason::KindMismatch {
                    existing: existing.kind,
                    proposed: term.kind,
                }
            } else if existing.unit != term.unit {
                ConflictReason::UnitMismatch {
                    existing: existing.unit.clone(),
                    proposed: term.unit.clone(),
                }
            } else {
                ConflictReason::NameTaken
            };
            return Err(VocabError::Conflict {
                name: term.canonical_name.clone(),
                existing: existing.canonical_name.clone(),
                reason,
            });
        }
        for name in own {
            if let Some(existing) = self.names.get(name) {
                return Err(VocabError::Conflict {
                    name: name.to_string(),
                    existing: existing.clone(),
                    reason: ConflictReason::NameCollision { name: name.to_string() },
                });
            }
        }
        Ok(())
    }

    fn canonical(&self, name: &str) -> Result<&str, VocabError> {
        self.names
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| VocabError::NotFound(name.to_string()))
    }

    fn check_decide(&self, name: &str) -> Result<String, VocabError> {
        let canonical = self.canonical(name)?.to_string();
        let term = &self.terms[&canonical];
        if term.status != TermStatus::Proposed {
            return Err(VocabError::InvalidTransition {
                name: canonical,
                status: term.status,
            });
        }
        Ok(canonical)
    }

    fn apply(&mut self, event: LedgerEvent) -> Result<(), VocabError> {
        match event {
            LedgerEvent::Register { term } => {
                self.check_register(&term)?;
                self.names
                    .insert(term.canonical_name.clone(), term.canonical_name.clone());
                for alias in &term.aliases {
                    self.names.insert(alias.clone(), term.canonical_name.clone());
                }
                self.terms.insert(term.canonical_name.clone(), term);
            }
            LedgerEvent::Accept { name, actor, at } => {
                let canonical = self.check_decide(&name)?;
                let term = self.terms.get_mut(&canonical).unwrap();
                term.status = TermStatus::Accepted;
                term.decision = Some(TermDecision { actor, at });
            }
            LedgerEvent::Reject { name, actor, at } => {
                let canonical = self.check_decide(&name)?;
                let term = self.terms.get_mut(&canonical).unwrap();
                term.status = TermStatus::Rejected;
                term.decision = Some(TermDecision { actor, at });
            }
        }
        Ok(())
    }
}

/// Vocabulary registry. Mutations are serialized; reads see committed state.
pub struct VocabularyRegistry {
    state: RwLock<State>,
    ledger: Option<Mutex<Journal<LedgerEvent>>>,
}

impl VocabularyRegistry {
    pub fn in_memory() -> Self {
        VocabularyRegistry {
            state: RwLock::new(State::default()),
            ledger: None,
        }
    }

    /// Opens a ledger-backed registry, replaying its events.
    pub fn open(path: &Path, durability: Durability) -> Result<Self, VocabError> {
        let (journal, events) = Journal::open(path, durability)?;
        let mut state = State::default();
        for (i, event) in events.into_iter().enumerate() {
            state
                .apply(event)
                .map_err(|e| VocabError::Ledger(format!("event {} does not replay: {e}", i + 1)))?;
        }
        Ok(VocabularyRegistry {
            state: RwLock::new(state),
            ledger: Some(Mutex::new(journal)),
        })
    }

    fn commit(&self, event: LedgerEvent) -> Result<(), VocabError> {
        // Ledger lock first, then state: one writer at a time, and the event
        // is durable before readers can observe it.
        let mut ledger = self.ledger.as_ref().map(|l| l.lock().unwrap());
        let mut state = self.state.write().unwrap();
        match &event {
            LedgerEvent::Register { term } => state.check_register(term)?,
            LedgerEvent::Accept { name, .. } | LedgerEvent::Reject { name, .. } => {
                state.check_decide(name)?;
            }
        }
        if let Some(journal) = ledger.as_mut() {
            journal.append(&event)?;
        }
        state.apply(event)
    }

    pub fn register(&self, mut term: VocabularyTerm) -> Result<RegistrationOutcome, VocabError> {
        term.unit = term.unit.as_deref().map(normalize_unit);
        self.commit(LedgerEvent::Register { term })?;
        Ok(RegistrationOutcome::Proposed)
    }

    /// Looks a term up by canonical name or alias.
    pub fn resolve(&self, name: &str) -> Result<VocabularyTerm, VocabError> {
        let state = self.state.read().unwrap();
        let canonical = state.canonical(name)?;
        Ok(state.terms[canonical].clone())
    }

    pub fn accept(&self, name: &str, actor: &str, at: Timestamp) -> Result<VocabularyTerm, VocabError> {
        self.commit(LedgerEvent::Accept {
            name: name.to_string(),
            actor: actor.to_string(),
            at,
        })?;
        self.resolve(name)
    }

    pub fn reject(&self, name: &str, actor: &str, at: Timestamp) -> Result<VocabularyTerm, VocabError> {
        self.commit(LedgerEvent::Reject {
            name: name.to_string(),
            actor: actor.to_string(),
            at,
        })?;
        self.resolve(name)
    }

    /// All terms ordered by canonical name.
    pub fn list(&self) -> Vec<VocabularyTerm> {
        self.state.read().unwrap().terms.values().cloned().collect()
    }

    /// Every canonical name and alias, duplicates included (there should be none).
    pub fn all_names(&self) -> Vec<String> {
        self.state
            .read()
            .unwrap()
            .terms
            .values()
            .flat_map(|t| std::iter::once(t.canonical_name.clone()).chain(t.aliases.iter().cloned()))
            .collect()
    }
}
