//! Accuracy metrics, box overlap and baseline-relative reports.
//!
//! All accuracies are reduced through [`Tally`], a set of integer counters
//! that can be filled in any order and merged, so results do not depend on
//! record order or on how the work was split across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Metric};
use crate::error::{Error, Result};

/// One prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub image_id: String,
    pub predicted: usize,
    pub gt_labels: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl EvalOutcome {
    pub fn new(image_id: impl Into<String>, predicted: usize, gt_labels: impl IntoIterator<Item = usize>) -> Self {
        EvalOutcome {
            image_id: image_id.into(),
            predicted,
            gt_labels: gt_labels.into_iter().collect(),
            group: None,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    pub fn is_hit(&self) -> bool {
        self.gt_labels.contains(&self.predicted)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Count {
    hits: u64,
    total: u64,
}

impl Count {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.hits += hit as u64;
    }

    fn merge(&mut self, other: Count) {
        self.hits += other.hits;
        self.total += other.total;
    }

    fn ratio(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Mergeable counters for every supported metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tally {
    all: Count,
    multi_label: u64,
    per_class: BTreeMap<usize, Count>,
    per_group: BTreeMap<String, Count>,
    ungrouped: u64,
}

impl Tally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, outcome: &EvalOutcome) {
        let hit = outcome.is_hit();
        self.all.add(hit);
        if outcome.gt_labels.len() == 1 {
            let class = *outcome.gt_labels.first().expect("one label");
            self.per_class.entry(class).or_default().add(hit);
        } else {
            self.multi_label += 1;
        }
        match &outcome.group {
            Some(g) => self.per_group.entry(g.clone()).or_default().add(hit),
            None => self.ungrouped += 1,
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.all.merge(other.all);
        self.multi_label += other.multi_label;
        self.ungrouped += other.ungrouped;
        for (k, v) in &other.per_class {
            self.per_class.entry(*k).or_default().merge(*v);
        }
        for (k, v) in &other.per_group {
            self.per_group.entry(k.clone()).or_default().merge(*v);
        }
    }

    pub fn len(&self) -> u64 {
        self.all.total
    }

    pub fn is_empty(&self) -> bool {
        self.all.total == 0
    }

    fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract("no outcomes to evaluate"));
        }
        Ok(())
    }

    fn single_label(&self, metric: &str) -> Result<()> {
        if self.multi_label > 0 {
            return Err(Error::contract(format!(
                "{metric} accuracy needs one label per image; {} outcomes carry several",
                self.multi_label
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> Result<f64> {
        self.non_empty()?;
        self.single_label("total")?;
        Ok(self.all.ratio())
    }

    pub fn macro_avg(&self) -> Result<f64> {
        self.non_empty()?;
        self.single_label("macro")?;
        let sum: f64 = self.per_class.values().map(Count::ratio).sum();
        Ok(sum / self.per_class.len() as f64)
    }

    pub fn real(&self) -> Result<f64> {
        self.non_empty()?;
        Ok(self.all.ratio())
    }

    /// `(worst group accuracy, overall accuracy)`.
    pub fn worst_group(&self) -> Result<(f64, f64)> {
        self.non_empty()?;
        if self.ungrouped > 0 {
            return Err(Error::contract(format!("{} outcomes carry no group", self.ungrouped)));
        }
        let worst = self.per_group.values().map(Count::ratio).fold(f64::INFINITY, f64::min);
        Ok((worst, self.all.ratio()))
    }

    pub fn per_group(&self) -> BTreeMap<String, f64> {
        self.per_group.iter().map(|(k, c)| (k.clone(), c.ratio())).collect()
    }

    /// The headline value of `metric`.
    pub fn value(&self, metric: Metric) -> Result<f64> {
        match metric {
            Metric::Total => self.total(),
            Metric::Macro => self.macro_avg(),
            Metric::Real => self.real(),
            Metric::WorstGroup => self.worst_group().map(|(w, _)| w),
        }
    }
}

impl<'a> FromIterator<&'a EvalOutcome> for Tally {
    fn from_iter<I: IntoIterator<Item = &'a EvalOutcome>>(iter: I) -> Self {
        let mut t = Tally::new();
        iter.into_iter().for_each(|o| t.push(o));
        t
    }
}

/// Fraction of exact hits; every outcome must carry a single label.
pub fn total_accuracy(outcomes: &[EvalOutcome]) -> Result<f64> {
    outcomes.iter().collect::<Tally>().total()
}

/// Mean of per-class accuracies over the classes present in the ground truth.
pub fn macro_accuracy(outcomes: &[EvalOutcome]) -> Result<f64> {
    outcomes.iter().collect::<Tally>().macro_avg()
}

/// Fraction of predictions contained in the image's label set.
pub fn real_accuracy(outcomes: &[EvalOutcome]) -> Result<f64> {
    outcomes.iter().collect::<Tally>().real()
}

/// `(worst group accuracy, overall accuracy)`; every outcome needs a group.
pub fn worst_group_accuracy(outcomes: &[EvalOutcome]) -> Result<(f64, f64)> {
    outcomes.iter().collect::<Tally>().worst_group()
}

pub fn accuracy(metric: Metric, outcomes: &[EvalOutcome]) -> Result<f64> {
    outcomes.iter().collect::<Tally>().value(metric)
}

/// Intersection over union after clipping both boxes to the unit square.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_unclipped(&a.clipped(), &b.clipped())
}

/// Intersection over union on the raw coordinates.
pub fn iou_unclipped(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) as f64 - a.x0.max(b.x0) as f64).max(0.0);
    let ih = (a.y1.min(b.y1) as f64 - a.y0.max(b.y0) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Mean IoU per class between generated and ground-truth boxes, in percent.
///
/// Classes with no pairs are left out of the result.
pub fn mean_class_iou(pairs: &BTreeMap<usize, Vec<(BBox, BBox)>>) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for (&class, list) in pairs {
        if list.is_empty() {
            log::warn!("class {class} has no box pairs; omitted from IoU table");
            continue;
        }
        let sum: f64 = list.iter().map(|(g, t)| iou(g, t)).sum();
        out.insert(class, 100.0 * sum / list.len() as f64);
    }
    out
}

/// Difference in percentage points, rounded to two decimals.
pub fn percent_delta(baseline_pct: f64, candidate_pct: f64) -> f64 {
    let d = ((candidate_pct - baseline_pct) * 100.0).round() / 100.0;
    if d == 0.0 {
        0.0
    } else {
        d
    }
}

/// Signed two-decimal rendering: `+1.03`, `-0.40`, `+0.00`.
pub fn format_delta(points: f64) -> String {
    let rounded = percent_delta(0.0, points);
    format!("{rounded:+.2}")
}

/// One row of a comparative report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    /// Metric value of the candidate, in `[0, 1]`.
    pub value: f64,
    pub baseline_value: f64,
    /// Percentage points relative to the baseline.
    pub delta: f64,
}

/// A metric evaluated for several methods relative to a baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: Metric,
    /// `None` when every method is compared with its own baseline counterpart.
    pub baseline_method: Option<String>,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn delta(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.delta)
    }

    /// Markdown table with percentages and signed deltas.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let base = self.baseline_method.as_deref().unwrap_or("same method");
        let _ = writeln!(s, "| method | {} (%) | baseline (%) | delta vs {base} |", self.metric);
        let _ = writeln!(s, "|---|---:|---:|---:|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {} |",
                r.method,
                100.0 * r.value,
                100.0 * r.baseline_value,
                format_delta(r.delta)
            );
        }
        s
    }
}

/// Compares `candidate` with `baseline` method by method.
///
/// With `baseline_method` set, every candidate method is compared with that
/// one baseline method; otherwise each method with its namesake. Both sides
/// must cover the same images.
pub fn delta_report(
    metric: Metric,
    baseline: &BTreeMap<String, Vec<EvalOutcome>>,
    candidate: &BTreeMap<String, Vec<EvalOutcome>>,
    baseline_method: Option<&str>,
) -> Result<MetricReport> {
    let ids = |v: &[EvalOutcome]| v.iter().map(|o| o.image_id.clone()).collect::<BTreeSet<_>>();
    let mut rows = Vec::new();
    for (method, outcomes) in candidate {
        let base_name = baseline_method.unwrap_or(method);
        let base = baseline
            .get(base_name)
            .ok_or_else(|| Error::contract(format!("baseline has no method `{base_name}`")))?;
        if ids(base) != ids(outcomes) || base.len() != outcomes.len() {
            return Err(Error::contract(format!(
                "baseline `{base_name}` and candidate `{method}` cover different images"
            )));
        }
        let b = accuracy(metric, base)?;
        let c = accuracy(metric, outcomes)?;
        rows.push(ReportRow {
            method: method.clone(),
            value: c,
            baseline_value: b,
            delta: percent_delta(100.0 * b, 100.0 * c),
        });
    }
    Ok(MetricReport {
        metric,
        baseline_method: baseline_method.map(str::to_owned),
        rows,
    })
}
