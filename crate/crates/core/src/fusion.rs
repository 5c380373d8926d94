//! Foreground candidate selection and FG/FULL fusion.
//!
//! A record carries one logit vector per candidate crop plus the FULL image.
//! Selection picks one foreground prediction; fusion then keeps it only when
//! its weighted confidence strictly beats the FULL confidence weighted by the
//! top objectness score:
//!
//! ```text
//! k  = argmax_k  w_k * p_k
//! y  = y_k   if w_k * p_k > w_1 * p_F
//!      y_F   otherwise
//! ```
//!
//! The alternative strategies ([`SelectionStrategy`]) exist for ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{top_prediction, ImageRecord, Prediction, View};
use crate::error::{Error, Result};

/// Side fraction of the centered crop used by [`SelectionStrategy::CenterCrop`].
pub const CENTER_CROP_FRACTION: f32 = 0.875;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Maximum objectness-weighted confidence.
    Owmc,
    /// Maximum classifier confidence, objectness ignored.
    Unweighted,
    /// The candidate with the highest objectness.
    #[serde(rename = "hs")]
    HighestScore,
    /// The synthesized crop covering all candidate boxes.
    Union,
    /// The candidate with the largest box.
    MaxArea,
    /// A fixed centered crop, independent of the detector.
    CenterCrop,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 6] = [
        SelectionStrategy::Owmc,
        SelectionStrategy::Unweighted,
        SelectionStrategy::HighestScore,
        SelectionStrategy::Union,
        SelectionStrategy::MaxArea,
        SelectionStrategy::CenterCrop,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Owmc => "owmc",
            SelectionStrategy::Unweighted => "unweighted",
            SelectionStrategy::HighestScore => "hs",
            SelectionStrategy::Union => "union",
            SelectionStrategy::MaxArea => "max-area",
            SelectionStrategy::CenterCrop => "center-crop",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        SelectionStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// Weight applied to the FULL confidence in the fusion rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FullWeightMode {
    /// `w_1`, the objectness of the top candidate.
    #[serde(rename = "top")]
    TopObjectness,
    /// A constant weight of 1.
    Unit,
}

impl fmt::Display for FullWeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FullWeightMode::TopObjectness => "top",
            FullWeightMode::Unit => "unit",
        })
    }
}

impl FromStr for FullWeightMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "top" => Ok(FullWeightMode::TopObjectness),
            "unit" => Ok(FullWeightMode::Unit),
            _ => Err(format!("unknown full-weight mode `{s}`")),
        }
    }
}

/// The foreground prediction chosen by a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectedFg {
    /// Absent for synthesized views (union, center crop).
    pub candidate_index: Option<usize>,
    pub view: View,
    pub prediction: Prediction,
    pub weighted_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Fg,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionDecision {
    pub source: Source,
    pub prediction: Prediction,
    /// Weighted confidence of the selected crop, absent when nothing was selected.
    pub fg_score: Option<f64>,
    pub full_score: f64,
}

/// Per-method predictions for one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodPredictions {
    pub full: Prediction,
    pub fg: Prediction,
    pub fused: FusionDecision,
    pub selected: Option<SelectedFg>,
}

/// The three prediction methods reported per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Full,
    Fg,
    FgFull,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Full, Method::Fg, Method::FgFull];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Full => "FULL",
            Method::Fg => "FG",
            Method::FgFull => "FG+FULL",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl MethodPredictions {
    pub fn get(&self, method: Method) -> Prediction {
        match method {
            Method::Full => self.full,
            Method::Fg => self.fg,
            Method::FgFull => self.fused.prediction,
        }
    }
}

/// Prediction of one view straight from its logits.
pub fn view_prediction(record: &ImageRecord, view: View) -> Result<Prediction> {
    let logits = record.view(view).ok_or_else(|| missing_view(record, view))?;
    top_prediction(logits).map_err(|e| Error::rejected(&record.image_id, e.to_string()))
}

fn missing_view(record: &ImageRecord, view: View) -> Error {
    match view {
        View::Union | View::CenterCrop => Error::StrategyUnavailable {
            image_id: record.image_id.clone(),
            view: view.to_string(),
        },
        _ => Error::rejected(&record.image_id, format!("missing view {view}")),
    }
}

/// Picks the foreground prediction for `record`; `None` when there are no candidates.
pub fn select_candidate(record: &ImageRecord, strategy: SelectionStrategy) -> Result<Option<SelectedFg>> {
    select_candidate_with(record, strategy, |v| view_prediction(record, v))
}

/// Like [`select_candidate`] but with caller-supplied per-view predictions,
/// e.g. after metadata reweighting.
pub fn select_candidate_with<F>(
    record: &ImageRecord,
    strategy: SelectionStrategy,
    mut predict: F,
) -> Result<Option<SelectedFg>>
where
    F: FnMut(View) -> Result<Prediction>,
{
    let Some(top) = record.candidates.first() else {
        return Ok(None);
    };
    let w1 = top.objectness as f64;

    let synthesized = |view: View, weight: f64, predict: &mut F| -> Result<Option<SelectedFg>> {
        if record.view(view).is_none() {
            return Err(missing_view(record, view));
        }
        let prediction = predict(view)?;
        Ok(Some(SelectedFg {
            candidate_index: None,
            view,
            prediction,
            weighted_score: weight * prediction.confidence,
        }))
    };

    match strategy {
        SelectionStrategy::Union => return synthesized(View::Union, w1, &mut predict),
        SelectionStrategy::CenterCrop => return synthesized(View::CenterCrop, 1.0, &mut predict),
        _ => {}
    }

    // Candidates are sorted by objectness, so a strict `>` keeps the earlier
    // (higher-objectness) candidate on ties.
    let mut best: Option<(f64, SelectedFg)> = None;
    for (pos, c) in record.candidates.iter().enumerate() {
        if strategy == SelectionStrategy::HighestScore && pos > 0 {
            break;
        }
        let view = View::Candidate(c.index);
        let prediction = predict(view)?;
        let w = c.objectness as f64;
        let weighted = match strategy {
            SelectionStrategy::Unweighted => prediction.confidence,
            _ => w * prediction.confidence,
        };
        let key = match strategy {
            SelectionStrategy::MaxArea => c.bbox.area(),
            _ => weighted,
        };
        let sel = SelectedFg {
            candidate_index: Some(c.index),
            view,
            prediction,
            weighted_score: weighted,
        };
        match best {
            Some((k, _)) if key <= k => {}
            _ => best = Some((key, sel)),
        }
    }
    Ok(best.map(|(_, s)| s))
}

/// Applies the fusion rule. Equal scores go to FULL.
pub fn fuse(
    selected: Option<&SelectedFg>,
    full_logits: &[f32],
    w1: Option<f64>,
    mode: FullWeightMode,
) -> Result<FusionDecision> {
    fuse_prediction(selected, top_prediction(full_logits)?, w1, mode)
}

/// [`fuse`] with an already computed FULL prediction.
pub fn fuse_prediction(
    selected: Option<&SelectedFg>,
    full: Prediction,
    w1: Option<f64>,
    mode: FullWeightMode,
) -> Result<FusionDecision> {
    let weight = match (mode, w1) {
        (FullWeightMode::Unit, _) => 1.0,
        (FullWeightMode::TopObjectness, Some(w)) => w,
        (FullWeightMode::TopObjectness, None) if selected.is_none() => 1.0,
        (FullWeightMode::TopObjectness, None) => {
            return Err(Error::contract(
                "top-objectness fusion needs w1 when a candidate is selected",
            ))
        }
    };
    let full_score = weight * full.confidence;
    let decision = match selected {
        Some(s) if s.weighted_score > full_score => FusionDecision {
            source: Source::Fg,
            prediction: s.prediction,
            fg_score: Some(s.weighted_score),
            full_score,
        },
        _ => FusionDecision {
            source: Source::Full,
            prediction: full,
            fg_score: selected.map(|s| s.weighted_score),
            full_score,
        },
    };
    Ok(decision)
}

/// FULL, FG and fused predictions for one record.
pub fn run_pipeline(
    record: &ImageRecord,
    strategy: SelectionStrategy,
    mode: FullWeightMode,
) -> Result<MethodPredictions> {
    run_pipeline_with(record, strategy, mode, |v| view_prediction(record, v))
}

pub fn run_pipeline_with<F>(
    record: &ImageRecord,
    strategy: SelectionStrategy,
    mode: FullWeightMode,
    mut predict: F,
) -> Result<MethodPredictions>
where
    F: FnMut(View) -> Result<Prediction>,
{
    if record.view(View::Full).is_none() {
        return Err(missing_view(record, View::Full));
    }
    let full = predict(View::Full)?;
    let selected = select_candidate_with(record, strategy, &mut predict)?;
    let fused = fuse_prediction(selected.as_ref(), full, record.top_objectness(), mode)?;
    Ok(MethodPredictions {
        full,
        fg: selected.map_or(full, |s| s.prediction),
        fused,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::data::{BBox, Candidate};

    /// Logits over two classes whose softmax puts `p` on class `class`.
    fn logits_for(p: f64, class: usize) -> Vec<f32> {
        let l = (p / (1.0 - p)).ln() as f32;
        let mut v = vec![0.0, 0.0];
        v[class] = l;
        v
    }

    fn record(cands: &[(f32, f64, usize)], full: (f64, usize)) -> ImageRecord {
        let mut logits = BTreeMap::new();
        logits.insert(View::Full, logits_for(full.0, full.1));
        let candidates = cands
            .iter()
            .enumerate()
            .map(|(i, &(w, p, c))| {
                logits.insert(View::Candidate(i), logits_for(p, c));
                Candidate {
                    index: i,
                    bbox: BBox::new(0.0, 0.0, 0.1 * (i + 1) as f32, 0.5),
                    objectness: w,
                }
            })
            .collect();
        ImageRecord {
            image_id: "r".into(),
            candidates,
            logits,
            gt_labels: [0].into(),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn single_candidate() {
        let mut r = record(&[(0.7, 0.6, 1)], (0.9, 0));
        r.logits
            .insert(View::Candidate(0), vec![0.4f32.ln(), 0.3f32.ln(), 0.3f32.ln()]);
        let s = select_candidate(&r, SelectionStrategy::Owmc).unwrap().unwrap();
        assert_eq!(s.candidate_index, Some(0));
        assert_eq!(s.prediction.class_id, 0);
        assert!((s.weighted_score - 0.28).abs() < 1e-6);
    }

    #[test]
    fn weighted_versus_unweighted() {
        let r = record(&[(0.9, 0.5 + 1e-9, 0), (0.3, 0.9, 1)], (0.6, 0));
        let owmc = select_candidate(&r, SelectionStrategy::Owmc).unwrap().unwrap();
        assert_eq!(owmc.candidate_index, Some(0));
        assert!((owmc.weighted_score - 0.45).abs() < 1e-6);
        let unw = select_candidate(&r, SelectionStrategy::Unweighted).unwrap().unwrap();
        assert_eq!(unw.candidate_index, Some(1));
        assert!((unw.weighted_score - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_candidates_select_nothing() {
        let r = record(&[], (0.8, 1));
        for s in SelectionStrategy::ALL {
            assert!(select_candidate(&r, s).unwrap().is_none());
        }
        let out = run_pipeline(&r, SelectionStrategy::Owmc, FullWeightMode::TopObjectness).unwrap();
        assert_eq!(out.full, out.fg);
        assert_eq!(out.full, out.fused.prediction);
        assert_eq!(out.fused.source, Source::Full);
    }

    #[test]
    fn highest_score_and_max_area() {
        let r = record(&[(0.9, 0.6, 0), (0.5, 0.99, 1), (0.3, 0.7, 1)], (0.6, 0));
        let hs = select_candidate(&r, SelectionStrategy::HighestScore).unwrap().unwrap();
        assert_eq!(hs.candidate_index, Some(0));
        let ma = select_candidate(&r, SelectionStrategy::MaxArea).unwrap().unwrap();
        assert_eq!(ma.candidate_index, Some(2));
    }

    #[test]
    fn max_area_tie_prefers_objectness() {
        let mut r = record(&[(0.9, 0.6, 0), (0.5, 0.99, 1)], (0.6, 0));
        r.candidates[1].bbox = r.candidates[0].bbox;
        let ma = select_candidate(&r, SelectionStrategy::MaxArea).unwrap().unwrap();
        assert_eq!(ma.candidate_index, Some(0));
    }

    #[test]
    fn synthesized_views() {
        let mut r = record(&[(0.8, 0.6, 0), (0.4, 0.9, 1)], (0.6, 0));
        let err = select_candidate(&r, SelectionStrategy::Union).unwrap_err();
        assert!(matches!(err, Error::StrategyUnavailable { ref view, .. } if view == "UNION"));
        assert!(select_candidate(&r, SelectionStrategy::CenterCrop).is_err());

        r.logits.insert(View::Union, logits_for(0.75, 1));
        r.logits.insert(View::CenterCrop, logits_for(0.75, 1));
        let u = select_candidate(&r, SelectionStrategy::Union).unwrap().unwrap();
        assert_eq!(u.candidate_index, None);
        assert!((u.weighted_score - 0.8 * 0.75).abs() < 1e-6);
        let c = select_candidate(&r, SelectionStrategy::CenterCrop).unwrap().unwrap();
        assert!((c.weighted_score - 0.75).abs() < 1e-6);
    }

    #[test]
    fn fuse_fallback_and_tie() {
        let full = logits_for(0.6, 1);
        let d = fuse(None, &full, None, FullWeightMode::TopObjectness).unwrap();
        assert_eq!(d.source, Source::Full);
        assert_eq!(d.prediction.class_id, 1);

        let p = top_prediction(&full).unwrap();
        let sel = SelectedFg {
            candidate_index: Some(0),
            view: View::Candidate(0),
            prediction: Prediction {
                class_id: 0,
                confidence: 0.8,
            },
            weighted_score: 0.8 * p.confidence,
        };
        let d = fuse(Some(&sel), &full, Some(0.8), FullWeightMode::TopObjectness).unwrap();
        assert_eq!(d.fg_score, Some(d.full_score));
        assert_eq!(d.source, Source::Full);
    }

    #[test]
    fn fuse_prefers_stronger_foreground() {
        let sel = SelectedFg {
            candidate_index: Some(0),
            view: View::Candidate(0),
            prediction: Prediction {
                class_id: 0,
                confidence: 0.6,
            },
            weighted_score: 0.9 * 0.6,
        };
        let full = Prediction {
            class_id: 1,
            confidence: 0.5,
        };
        let d = fuse_prediction(Some(&sel), full, Some(0.9), FullWeightMode::TopObjectness).unwrap();
        assert_eq!(d.source, Source::Fg);
        assert_eq!(d.prediction.class_id, 0);
        assert!((d.full_score - 0.45).abs() < 1e-12);

        let unit = fuse_prediction(Some(&sel), full, Some(0.9), FullWeightMode::Unit).unwrap();
        assert_eq!(unit.full_score, 0.5);
        assert_eq!(unit.source, Source::Fg);
    }

    #[test]
    fn fuse_requires_w1_with_selection() {
        let sel = SelectedFg {
            candidate_index: Some(0),
            view: View::Candidate(0),
            prediction: Prediction {
                class_id: 0,
                confidence: 0.6,
            },
            weighted_score: 0.3,
        };
        let full = Prediction {
            class_id: 1,
            confidence: 0.5,
        };
        assert!(matches!(
            fuse_prediction(Some(&sel), full, None, FullWeightMode::TopObjectness),
            Err(Error::Contract(_))
        ));
        assert!(fuse_prediction(Some(&sel), full, None, FullWeightMode::Unit).is_ok());
    }

    #[test]
    fn pipeline_takes_foreground_when_it_wins() {
        // FULL says class 1 at 0.55; the crop says class 0 at 0.95 with w = 0.9
        let r = record(&[(0.9, 0.95, 0)], (0.55, 1));
        let out = run_pipeline(&r, SelectionStrategy::Owmc, FullWeightMode::TopObjectness).unwrap();
        assert_eq!(out.full.class_id, 1);
        assert_eq!(out.fg.class_id, 0);
        assert_eq!(out.fused.source, Source::Fg);
        assert_eq!(out.get(Method::FgFull).class_id, 0);
    }

    #[test]
    fn missing_candidate_view_is_rejected() {
        let mut r = record(&[(0.9, 0.95, 0)], (0.55, 1));
        r.logits.remove(&View::Candidate(0));
        assert!(matches!(
            run_pipeline(&r, SelectionStrategy::Owmc, FullWeightMode::Unit),
            Err(Error::Rejected { .. })
        ));
    }

    #[test]
    fn names_parse_back() {
        for s in SelectionStrategy::ALL {
            assert_eq!(s.name().parse::<SelectionStrategy>().unwrap(), s);
        }
        assert_eq!("unit".parse::<FullWeightMode>().unwrap(), FullWeightMode::Unit);
        assert!("max_area".parse::<SelectionStrategy>().is_err());
    }
}
