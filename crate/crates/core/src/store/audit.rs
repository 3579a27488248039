//! Full-scan integrity audit.

use std::collections::BTreeSet;
use std::fs;

use serde::Serialize;

use super::{Datastore, Lifecycle};
use crate::digest::sha256_hex;
use crate::model::Outcome;
use crate::pipeline::RunOutcome;
use crate::table::Table;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditViolation {
    pub subject: String,
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditReport {
    pub objects_checked: usize,
    pub entries_checked: usize,
    pub datasets_checked: usize,
    pub violations: Vec<AuditViolation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, subject: impl Into<String>, code: &'static str, message: impl Into<String>) {
        self.violations.push(AuditViolation {
            subject: subject.into(),
            code,
            message: message.into(),
        });
    }
}

impl Datastore {
    /// Re-hashes every object, checks lifecycle and gate invariants on every
    /// entry, and verifies every published dataset: files intact, rows
    /// CODE-validated by a successful run, and no participant identifier or
    /// listed sensitive value anywhere in the dataset or sidecar.
    pub fn audit(&self, sensitive_values: &BTreeSet<String>) -> AuditReport {
        let state = self.state.read().unwrap();
        let mut report = AuditReport::default();

        for (checksum, blob) in &state.objects {
            report.objects_checked += 1;
            match fs::read(self.blob_path(checksum)) {
                Err(e) => report.flag(checksum, "MISSING_OBJECT", e.to_string()),
                Ok(bytes) => {
                    let actual = sha256_hex(&bytes);
                    if &actual != checksum {
                        report.flag(checksum, "CHECKSUM_MISMATCH", format!("content hashes to {actual}"));
                    } else if bytes.len() as u64 != blob.size_bytes {
                        report.flag(checksum, "SIZE_MISMATCH", "recorded size differs");
                    }
                }
            }
        }

        let mut needles: BTreeSet<&str> = sensitive_values.iter().map(String::as_str).collect();
        for (id, entry) in &state.entries {
            report.entries_checked += 1;
            needles.insert(&entry.participant_id);
            if let Some(blob) = &entry.blob {
                if !state.objects.contains_key(&blob.checksum) {
                    report.flag(id, "DANGLING_BLOB", format!("links missing object {}", blob.checksum));
                }
            }
            let outcome_consistent =
                (entry.validation.outcome == Outcome::Valid) == entry.validation.violations.is_empty();
            if !outcome_consistent {
                report.flag(id, "REPORT_INCONSISTENT", "outcome disagrees with violations");
            }
            if entry.lifecycle == Lifecycle::Production && entry.validation.outcome != Outcome::Valid {
                report.flag(id, "PRODUCTION_NOT_VALID", "production entry failed input validation");
            }
        }

        for manifests in state.manifests.values() {
            for (dataset_id, manifest) in manifests {
                report.datasets_checked += 1;
                let subject = format!("{}/{}", manifest.environment, dataset_id);
                let (data, meta) = match self.read_outbound(manifest) {
                    Ok(files) => files,
                    Err(e) => {
                        report.flag(&subject, "DATASET_UNREADABLE", e.to_string());
                        continue;
                    }
                };
                match Table::from_csv(&data) {
                    Ok(t) if t.len() as u64 == manifest.row_count => {}
                    Ok(t) => report.flag(
                        &subject,
                        "ROW_COUNT_MISMATCH",
                        format!("manifest says {}, dataset has {}", manifest.row_count, t.len()),
                    ),
                    Err(e) => report.flag(&subject, "DATASET_UNREADABLE", e.to_string()),
                }
                let validated = state
                    .validation_for(&manifest.run_id, &manifest.code_schema_ref, &manifest.data_checksum)
                    .is_some_and(|v| v.report.is_valid());
                if !validated {
                    report.flag(
                        &subject,
                        "UNVALIDATED_DATASET",
                        format!("no valid CODE validation from run {}", manifest.run_id),
                    );
                }
                if let Some(run) = state.runs.get(&manifest.run_id) {
                    if run.outcome != RunOutcome::Succeeded {
                        report.flag(&subject, "FAILED_RUN_DATASET", format!("run {} failed", run.run_id));
                    }
                }
                let data_text = String::from_utf8_lossy(&data);
                let meta_text = String::from_utf8_lossy(&meta);
                for needle in &needles {
                    if needle.is_empty() {
                        continue;
                    }
                    if data_text.contains(needle) || meta_text.contains(needle) {
                        report.flag(
                            &subject,
                            "SENSITIVE_LEAK",
                            "dataset contains an identifier or sensitive value",
                        );
                        break;
                    }
                }
            }
        }
        report
    }
}
