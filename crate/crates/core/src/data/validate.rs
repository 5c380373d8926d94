use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::data::{DatasetManifest, ImageRecord, View};

/// Extra boxes are only kept when their objectness is strictly above this.
pub const BOX_POLICY_THRESHOLD: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub image_id: String,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn has_warnings(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Warning)
    }

    pub fn is_clean(&self) -> bool {
        !self.has_errors() && !self.has_warnings()
    }

    fn push(&mut self, severity: Severity, message: String) {
        self.findings.push(Finding { severity, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            let tag = match finding.severity {
                Severity::Info => "info",
                Severity::Warning => "warning",
                Severity::Error => "error",
            };
            writeln!(f, "{}: {tag}: {}", self.image_id, finding.message)?;
        }
        Ok(())
    }
}

/// Lists every contract or box-policy violation of `record` without touching it.
pub fn validate_record(record: &ImageRecord, manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport {
        image_id: record.image_id.clone(),
        findings: Vec::new(),
    };
    let classes = manifest.num_classes();

    if !record.is_sorted() {
        report.push(Severity::Error, "candidates not sorted by objectness".into());
    }
    if record.candidates.iter().enumerate().any(|(i, c)| c.index != i) {
        report.push(
            Severity::Error,
            "candidate indices are not 0..n in storage order".into(),
        );
    }

    if !record.logits.contains_key(&View::Full) {
        report.push(Severity::Error, "missing FULL view".into());
    }
    let indices: BTreeSet<usize> = record.candidates.iter().map(|c| c.index).collect();
    for &i in &indices {
        if !record.logits.contains_key(&View::Candidate(i)) {
            report.push(Severity::Error, format!("candidate {i} has no CANDIDATE:{i} view"));
        }
    }
    for view in record.logits.keys() {
        if let View::Candidate(i) = view {
            if !indices.contains(i) {
                report.push(Severity::Error, format!("view {view} has no matching candidate"));
            }
        }
    }
    for (view, values) in &record.logits {
        if values.len() != classes {
            report.push(
                Severity::Error,
                format!("view {view} has {} logits, expected {classes}", values.len()),
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            report.push(Severity::Error, format!("view {view} has non-finite logits"));
        }
    }

    if record.gt_labels.is_empty() {
        report.push(Severity::Error, "empty gt_labels".into());
    }
    for &label in &record.gt_labels {
        if label >= classes {
            report.push(Severity::Error, format!("gt label {label} outside [0, {classes})"));
        }
    }
    if let Some(field) = &manifest.group_field {
        if !record.metadata.contains_key(field) {
            report.push(Severity::Warning, format!("metadata field `{field}` missing"));
        }
    }

    for c in &record.candidates {
        if !(c.objectness.is_finite() && c.objectness > 0.0 && c.objectness <= 1.0) {
            report.push(
                Severity::Error,
                format!("candidate {} objectness {} outside (0, 1]", c.index, c.objectness),
            );
        }
        if !c.bbox.is_normalized() {
            report.push(
                Severity::Warning,
                format!(
                    "candidate {} box {:?} outside the unit square",
                    c.index,
                    <[f32; 4]>::from(c.bbox)
                ),
            );
        }
    }
    for (pos, c) in record.candidates.iter().enumerate().skip(1) {
        if c.objectness <= BOX_POLICY_THRESHOLD {
            report.push(
                Severity::Warning,
                format!(
                    "candidate {pos} objectness {} is not above the {BOX_POLICY_THRESHOLD} box threshold",
                    c.objectness
                ),
            );
        }
    }
    if record.candidates.is_empty() {
        report.push(Severity::Info, "no candidates; fallback to FULL expected".into());
    }
    report
}
