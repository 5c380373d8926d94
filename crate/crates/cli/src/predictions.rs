//! Prediction stream: one JSON line per image with the FULL, FG and FG+FULL outputs.
//!
//! ```text
//! {"image_id":"test-000000","gt_labels":[4],"group":"class4-rare",
//!  "predictions":{"FG":{"class_id":4,"confidence":0.99,"view":"CANDIDATE:0"},
//!                 "FG+FULL":{"class_id":4,"confidence":0.99,"source":"FG","fg_score":0.93,"full_score":0.52},
//!                 "FULL":{"class_id":3,"confidence":0.55}}}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rcor::data::{DatasetManifest, ImageRecord, Prediction};
use rcor::fusion::{Method, MethodPredictions, Source};
use rcor::metrics::{EvalOutcome, Tally};

use crate::failure::{lines, CliResult, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub class_id: usize,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_score: Option<f64>,
}

impl MethodEntry {
    fn plain(p: Prediction) -> Self {
        MethodEntry {
            class_id: p.class_id,
            confidence: p.confidence,
            view: None,
            source: None,
            fg_score: None,
            full_score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    pub gt_labels: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub predictions: BTreeMap<String, MethodEntry>,
}

impl PredictionLine {
    pub fn new(record: &ImageRecord, manifest: &DatasetManifest, out: &MethodPredictions) -> Self {
        let mut predictions = BTreeMap::new();
        predictions.insert(Method::Full.name().to_owned(), MethodEntry::plain(out.full));
        let mut fg = MethodEntry::plain(out.fg);
        fg.view = Some(out.selected.map_or("FULL".to_owned(), |s| s.view.to_string()));
        predictions.insert(Method::Fg.name().to_owned(), fg);
        let mut fused = MethodEntry::plain(out.fused.prediction);
        fused.source = Some(
            match out.fused.source {
                Source::Fg => "FG",
                Source::Full => "FULL",
            }
            .to_owned(),
        );
        fused.fg_score = out.fused.fg_score;
        fused.full_score = Some(out.fused.full_score);
        predictions.insert(Method::FgFull.name().to_owned(), fused);
        PredictionLine {
            image_id: record.image_id.clone(),
            gt_labels: record.gt_labels.clone(),
            group: manifest
                .group_field
                .as_ref()
                .and_then(|f| record.metadata.get(f))
                .cloned(),
            predictions,
        }
    }

    pub fn outcome(&self, method: &str) -> EvalOutcome {
        let mut o = EvalOutcome::new(
            self.image_id.clone(),
            self.predictions[method].class_id,
            self.gt_labels.iter().copied(),
        );
        o.group = self.group.clone();
        o
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("prediction lines serialize")
    }
}

/// Calls `f` on every line of a prediction file, checking that all lines
/// carry the same methods and classes below `num_classes`. Returns the
/// method names, FULL / FG / FG+FULL first.
pub fn scan_predictions<F>(path: &Path, num_classes: Option<usize>, mut f: F) -> CliResult<Vec<String>>
where
    F: FnMut(PredictionLine),
{
    let mut methods: Option<Vec<String>> = None;
    for item in lines(path)? {
        let (no, line) = item?;
        let at = |msg: String| Failure::contract(format!("{}:{no}: {msg}", path.display()));
        let p: PredictionLine =
            serde_json::from_str(&line).map_err(|e| at(format!("malformed prediction line: {e}")))?;
        if p.gt_labels.is_empty() {
            return Err(at(format!("`{}` has no gt_labels", p.image_id)));
        }
        match &methods {
            None => methods = Some(p.predictions.keys().cloned().collect()),
            Some(m) if !p.predictions.keys().eq(m.iter()) => {
                return Err(at(format!(
                    "`{}` carries a different set of methods than earlier lines",
                    p.image_id
                )))
            }
            Some(_) => {}
        }
        if let Some(c) = num_classes {
            if let Some(e) = p.predictions.values().find(|e| e.class_id >= c) {
                return Err(at(format!(
                    "`{}` predicts class {} outside [0, {c})",
                    p.image_id, e.class_id
                )));
            }
        }
        f(p);
    }
    let found = methods.ok_or_else(|| Failure::contract(format!("{}: no predictions", path.display())))?;
    let known = Method::ALL.map(|m| m.name());
    let mut ordered: Vec<String> = known
        .iter()
        .filter(|m| found.iter().any(|f| f == *m))
        .map(|m| m.to_string())
        .collect();
    ordered.extend(found.into_iter().filter(|m| !known.contains(&m.as_str())));
    Ok(ordered)
}

/// Per-method tallies of a prediction file, read in one streaming pass.
pub fn tally_predictions(path: &Path, num_classes: Option<usize>) -> CliResult<(Vec<String>, BTreeMap<String, Tally>)> {
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    let methods = scan_predictions(path, num_classes, |p| {
        for m in p.predictions.keys() {
            tallies.entry(m.clone()).or_default().push(&p.outcome(m));
        }
    })?;
    Ok((methods, tallies))
}

/// Every outcome of a prediction file, grouped by method.
pub fn read_predictions(path: &Path) -> CliResult<(Vec<String>, BTreeMap<String, Vec<EvalOutcome>>)> {
    let mut outcomes: BTreeMap<String, Vec<EvalOutcome>> = BTreeMap::new();
    let methods = scan_predictions(path, None, |p| {
        for m in p.predictions.keys() {
            outcomes.entry(m.clone()).or_default().push(p.outcome(m));
        }
    })?;
    Ok((methods, outcomes))
}
