//! Metadata priors: `P(value | class)` tables fitted on training labels and
//! used to reweight classifier probabilities as `p(y | x, m) ∝ p(y | x) P(m | y)`.
//!
//! The reweighting assumes the image is independent of the metadata given
//! the class, which holds better for foreground crops than for full images.
//! Several fields compose by applying their tables one after another; this
//! product form treats the fields as mutually independent given the class.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{softmax, ImageRecord, Prediction, View};
use crate::error::{Error, Result};
use crate::fusion::{run_pipeline, run_pipeline_with, FullWeightMode, MethodPredictions, SelectionStrategy, Source};

pub const DEFAULT_ALPHA: f64 = 1.0;

/// Smoothed `P(value | class)` for one categorical metadata field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    pub field_name: String,
    pub values: Vec<String>,
    pub alpha: f64,
    /// `counts[class][value]`.
    pub counts: Vec<Vec<u64>>,
    /// `probs[class][value]`; every row sums to one.
    pub probs: Vec<Vec<f64>>,
}

impl PriorTable {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.binary_search_by(|v| v.as_str().cmp(value)).ok()
    }

    /// `P(value | class)` for every class, or `None` for an unseen value.
    pub fn column(&self, value: &str) -> Option<Vec<f64>> {
        let j = self.value_index(value)?;
        Some(self.probs.iter().map(|row| row[j]).collect())
    }
}

/// Fits a table from `(class, value)` observations. Observations without a
/// value are ignored.
pub fn fit_prior<'a, I>(observations: I, num_classes: usize, field_name: &str, alpha: f64) -> Result<PriorTable>
where
    I: IntoIterator<Item = (usize, Option<&'a str>)>,
{
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::contract(format!(
            "smoothing alpha must be positive, got {alpha}"
        )));
    }
    let observed: Vec<(usize, &str)> = observations
        .into_iter()
        .filter_map(|(c, v)| v.map(|v| (c, v)))
        .collect();
    if observed.is_empty() {
        return Err(Error::contract(format!(
            "metadata field `{field_name}` is absent from every record"
        )));
    }
    if let Some(&(c, _)) = observed.iter().find(|(c, _)| *c >= num_classes) {
        return Err(Error::contract(format!("class {c} outside [0, {num_classes})")));
    }
    let values: Vec<String> = observed
        .iter()
        .map(|(_, v)| v.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = values.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();

    let mut counts = vec![vec![0u64; values.len()]; num_classes];
    for (c, v) in &observed {
        counts[*c][index[v]] += 1;
    }
    let k = values.len() as f64;
    let probs = counts
        .iter()
        .map(|row| {
            let n: u64 = row.iter().sum();
            let denom = n as f64 + alpha * k;
            row.iter().map(|&x| (x as f64 + alpha) / denom).collect()
        })
        .collect();
    Ok(PriorTable {
        field_name: field_name.to_owned(),
        values,
        alpha,
        counts,
        probs,
    })
}

/// Fits from image records; each ground-truth label counts once.
pub fn fit_prior_from_records(
    records: &[ImageRecord],
    num_classes: usize,
    field_name: &str,
    alpha: f64,
) -> Result<PriorTable> {
    let obs = records.iter().flat_map(|r| {
        let v = r.metadata.get(field_name).map(String::as_str);
        r.gt_labels.iter().map(move |&c| (c, v))
    });
    fit_prior(obs, num_classes, field_name, alpha)
}

/// Multiplies `probs` by `P(value | class)` and renormalizes.
///
/// An unseen value leaves `probs` unchanged (with a warning).
pub fn reweight(probs: &[f64], value: &str, table: &PriorTable) -> Result<Vec<f64>> {
    if probs.len() != table.num_classes() {
        return Err(Error::contract(format!(
            "probability vector has {} classes, prior table has {}",
            probs.len(),
            table.num_classes()
        )));
    }
    let Some(column) = table.column(value) else {
        log::warn!(
            "value `{value}` of field `{}` unseen when fitting; prior not applied",
            table.field_name
        );
        return Ok(probs.to_vec());
    };
    let mut out: Vec<f64> = probs.iter().zip(&column).map(|(p, q)| p * q).collect();
    let z: f64 = out.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::contract("reweighted probabilities vanish"));
    }
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// Applies every table whose field is present in `metadata`, in order.
pub fn reweight_all(probs: &[f64], metadata: &BTreeMap<String, String>, tables: &[PriorTable]) -> Result<Vec<f64>> {
    let mut p = probs.to_vec();
    for t in tables {
        if let Some(v) = metadata.get(&t.field_name) {
            p = reweight(&p, v, t)?;
        }
    }
    Ok(p)
}

/// On-disk document holding one table per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub tables: Vec<PriorTable>,
}

impl PriorSet {
    pub fn select(&self, fields: &[String]) -> Result<Vec<PriorTable>> {
        if fields.is_empty() {
            return Ok(self.tables.clone());
        }
        fields
            .iter()
            .map(|f| {
                self.tables
                    .iter()
                    .find(|t| &t.field_name == f)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("prior document has no field `{f}`")))
            })
            .collect()
    }
}

/// Where the prior enters the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorOrder {
    /// Reweight every view before selection and fusion.
    #[default]
    PreFusion,
    /// Run selection and fusion on raw predictions, then reweight the view
    /// each method ended up using.
    PostFusion,
}

fn reweighted_view(record: &ImageRecord, view: View, tables: &[PriorTable]) -> Result<Prediction> {
    let logits = record
        .view(view)
        .ok_or_else(|| Error::rejected(&record.image_id, format!("missing view {view}")))?;
    let probs = softmax(logits, 1.0)?;
    Prediction::from_probs(&reweight_all(&probs, &record.metadata, tables)?)
}

/// [`run_pipeline`] with metadata priors applied at the given stage.
pub fn run_pipeline_with_prior(
    record: &ImageRecord,
    strategy: SelectionStrategy,
    mode: FullWeightMode,
    tables: &[PriorTable],
    order: PriorOrder,
) -> Result<MethodPredictions> {
    match order {
        PriorOrder::PreFusion => run_pipeline_with(record, strategy, mode, |v| reweighted_view(record, v, tables)),
        PriorOrder::PostFusion => {
            let mut out = run_pipeline(record, strategy, mode)?;
            let fg_view = out.selected.map_or(View::Full, |s| s.view);
            out.full = reweighted_view(record, View::Full, tables)?;
            out.fg = reweighted_view(record, fg_view, tables)?;
            out.fused.prediction = match out.fused.source {
                Source::Fg => out.fg,
                Source::Full => out.full,
            };
            Ok(out)
        }
    }
}
