use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
///
/// Serialized as `[x0, y0, x1, y1]`. Boxes are not clipped on construction;
/// detectors occasionally emit coordinates slightly outside the unit square,
/// and [`BBox::is_normalized`] reports whether the invariant holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BBox {
    pub const UNIT: BBox = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    /// `0 <= x0 < x1 <= 1` and likewise for y.
    pub fn is_normalized(&self) -> bool {
        let ok = |lo: f32, hi: f32| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0;
        ok(self.x0, self.x1) && ok(self.y0, self.y1)
    }

    pub fn width(&self) -> f64 {
        (self.x1 as f64 - self.x0 as f64).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 as f64 - self.y0 as f64).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection with the unit square.
    pub fn clipped(&self) -> BBox {
        let c = |v: f32| v.clamp(0.0, 1.0);
        BBox::new(c(self.x0), c(self.y0), c(self.x1), c(self.y1))
    }

    /// Smallest box covering both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    /// Centered box covering `fraction` of each side of the image.
    pub fn center_crop(fraction: f32) -> BBox {
        let margin = (1.0 - fraction) / 2.0;
        BBox::new(margin, margin, 1.0 - margin, 1.0 - margin)
    }
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// One detector proposal for an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub bbox: BBox,
    pub objectness: f32,
}

/// Which input a logit vector was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    /// The uncropped image.
    Full,
    /// The square-padded crop of one candidate.
    Candidate(usize),
    /// The crop covering every candidate box.
    Union,
    /// The fixed centered crop.
    CenterCrop,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            View::Full => f.write_str("FULL"),
            View::Candidate(i) => write!(f, "CANDIDATE:{i}"),
            View::Union => f.write_str("UNION"),
            View::CenterCrop => f.write_str("CENTER_CROP"),
        }
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "FULL" => Ok(View::Full),
            "UNION" => Ok(View::Union),
            "CENTER_CROP" => Ok(View::CenterCrop),
            _ => s
                .strip_prefix("CANDIDATE:")
                .and_then(|i| i.parse().ok())
                .map(View::Candidate)
                .ok_or_else(|| format!("unknown view tag `{s}`")),
        }
    }
}

impl Serialize for View {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for View {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Predicted class and its softmax confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: usize,
    pub confidence: f64,
}

/// Everything known about one test image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// Sorted by objectness, highest first, once canonical.
    pub candidates: Vec<Candidate>,
    pub logits: BTreeMap<View, Vec<f32>>,
    pub gt_labels: BTreeSet<usize>,
    pub metadata: BTreeMap<String, String>,
}

impl ImageRecord {
    pub fn view(&self, view: View) -> Option<&[f32]> {
        self.logits.get(&view).map(Vec::as_slice)
    }

    pub fn full_logits(&self) -> Result<&[f32]> {
        self.view(View::Full)
            .ok_or_else(|| Error::rejected(&self.image_id, "missing FULL view"))
    }

    /// Objectness of the top candidate, if any.
    pub fn top_objectness(&self) -> Option<f64> {
        self.candidates.first().map(|c| c.objectness as f64)
    }

    pub fn is_sorted(&self) -> bool {
        self.candidates.windows(2).all(|w| w[0].objectness >= w[1].objectness)
    }

    /// Re-sorts candidates by objectness (stable) and renumbers them `0..n`,
    /// moving their `CANDIDATE:k` views along. Returns whether anything changed.
    pub fn canonicalize(&mut self) -> Result<bool> {
        let already = self.is_sorted() && self.candidates.iter().enumerate().all(|(i, c)| c.index == i);
        if already {
            return Ok(false);
        }
        let mut seen = BTreeSet::new();
        for c in &self.candidates {
            if !seen.insert(c.index) {
                return Err(Error::rejected(
                    &self.image_id,
                    format!("duplicate candidate index {}", c.index),
                ));
            }
        }
        // NaN objectness is rejected before this point, so total_cmp matches numeric order.
        self.candidates.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));

        let mut moved = BTreeMap::new();
        let old_logits = std::mem::take(&mut self.logits);
        let mut remap = BTreeMap::new();
        for (new, c) in self.candidates.iter_mut().enumerate() {
            remap.insert(c.index, new);
            c.index = new;
        }
        for (view, values) in old_logits {
            let view = match view {
                View::Candidate(old) => match remap.get(&old) {
                    Some(&new) => View::Candidate(new),
                    None => {
                        return Err(Error::rejected(
                            &self.image_id,
                            format!("view CANDIDATE:{old} has no candidate and cannot be renumbered"),
                        ))
                    }
                },
                other => other,
            };
            moved.insert(view, values);
        }
        self.logits = moved;
        Ok(true)
    }
}

/// Evaluation metric named by a dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Total,
    Macro,
    Real,
    WorstGroup,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Total => "total",
            Metric::Macro => "macro",
            Metric::Real => "real",
            Metric::WorstGroup => "worst_group",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dataset-level description shared by every record of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub class_names: Vec<String>,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_field: Option<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::contract("manifest lists no classes"));
        }
        let unique: BTreeSet<_> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return Err(Error::contract("manifest class names are not unique"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.check()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(objectness: &[f32]) -> ImageRecord {
        let mut logits = BTreeMap::new();
        logits.insert(View::Full, vec![0.0, 1.0]);
        let candidates = objectness
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                logits.insert(View::Candidate(i), vec![i as f32, 0.0]);
                Candidate {
                    index: i,
                    bbox: BBox::new(0.1, 0.1, 0.5, 0.5),
                    objectness: w,
                }
            })
            .collect();
        ImageRecord {
            image_id: "img".into(),
            candidates,
            logits,
            gt_labels: [0].into(),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn view_tags_round_trip() {
        for v in [View::Full, View::Candidate(12), View::Union, View::CenterCrop] {
            assert_eq!(v.to_string().parse::<View>().unwrap(), v);
        }
        assert!("CANDIDATE:x".parse::<View>().is_err());
        assert!("crop".parse::<View>().is_err());
    }

    #[test]
    fn view_order_puts_full_first() {
        let mut v = vec![
            View::CenterCrop,
            View::Candidate(10),
            View::Union,
            View::Candidate(2),
            View::Full,
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                View::Full,
                View::Candidate(2),
                View::Candidate(10),
                View::Union,
                View::CenterCrop
            ]
        );
    }

    #[test]
    fn canonicalize_sorts_and_moves_views() {
        let mut r = record(&[0.3, 0.9, 0.5]);
        assert!(r.canonicalize().unwrap());
        let w: Vec<f32> = r.candidates.iter().map(|c| c.objectness).collect();
        assert_eq!(w, vec![0.9, 0.5, 0.3]);
        // old candidate 1 carried logits [1, 0]
        assert_eq!(r.view(View::Candidate(0)).unwrap(), &[1.0, 0.0]);
        assert_eq!(r.view(View::Candidate(2)).unwrap(), &[0.0, 0.0]);
        assert!(!r.canonicalize().unwrap());
    }

    #[test]
    fn canonicalize_rejects_duplicates() {
        let mut r = record(&[0.3, 0.9]);
        r.candidates[1].index = 0;
        assert!(r.canonicalize().is_err());
    }

    #[test]
    fn bbox_geometry() {
        let b = BBox::new(0.0, 0.0, 0.5, 0.5);
        assert!((b.area() - 0.25).abs() < 1e-12);
        assert!(b.is_normalized());
        assert!(!BBox::new(0.5, 0.0, 0.5, 1.0).is_normalized());
        assert!(!BBox::new(-0.1, 0.0, 0.5, 1.0).is_normalized());
        assert_eq!(BBox::new(-0.1, 0.2, 1.3, 0.9).clipped(), BBox::new(0.0, 0.2, 1.0, 0.9));
        let c = BBox::center_crop(0.875);
        assert!((c.width() - 0.875).abs() < 1e-6);
        assert_eq!(b.hull(&BBox::new(0.4, 0.6, 0.9, 0.7)), BBox::new(0.0, 0.0, 0.9, 0.7));
    }

    #[test]
    fn manifest_checks() {
        let ok = r#"{"dataset_name":"d","class_names":["a","b"],"metric":"worst_group","group_field":"g"}"#;
        let m = DatasetManifest::from_json(ok).unwrap();
        assert_eq!(m.metric, Metric::WorstGroup);
        assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
        assert!(DatasetManifest::from_json(r#"{"dataset_name":"d","class_names":[],"metric":"total"}"#).is_err());
        assert!(
            DatasetManifest::from_json(r#"{"dataset_name":"d","class_names":["a","a"],"metric":"total"}"#).is_err()
        );
    }
}
