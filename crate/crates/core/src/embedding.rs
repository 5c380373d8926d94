//! Image-conditioned class prototypes and query-based box selection.
//!
//! A class prototype is built from the class's own training images: each
//! image is scored by the ratio of its two highest objectness scores, the
//! most single-object images come first, and the top-objectness box
//! embeddings of the best `k` images are averaged. The prototype then serves
//! as an image query: for each image, the box whose embedding is most
//! cosine-similar to the query is taken as the class-specific box.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, FloatArray};
use crate::error::{Error, Result};

/// Allowed deviation from unit norm for ingested box embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxEmbedding {
    pub index: usize,
    pub objectness: f32,
    pub vector: Vec<f32>,
    pub bbox: Option<BBox>,
}

/// Detector output for one training image of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub class_id: usize,
    /// Sorted by objectness, highest first.
    pub boxes: Vec<BoxEmbedding>,
    /// Box index ranked first by the class text prompt, when a text encoder was available.
    pub text_top_index: Option<usize>,
    pub gt_box: Option<BBox>,
}

impl EmbeddingRecord {
    pub fn top_box(&self) -> Option<&BoxEmbedding> {
        self.boxes.first()
    }

    pub fn objectness_pair(&self) -> Result<ObjectnessPair> {
        let s1 = self
            .boxes
            .first()
            .ok_or_else(|| Error::rejected(&self.image_id, "no boxes"))?
            .objectness as f64;
        objectness_ratio(s1, self.boxes.get(1).map(|b| b.objectness as f64))
    }
}

/// Top-two objectness scores of an image and their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectnessPair {
    pub s1: f64,
    pub s2: Option<f64>,
    /// `s1 / s2`, or `+inf` for an image with a single box.
    pub gamma: f64,
}

pub fn objectness_ratio(s1: f64, s2: Option<f64>) -> Result<ObjectnessPair> {
    if !(s1.is_finite() && s1 > 0.0) {
        return Err(Error::contract(format!("s1 must be positive, got {s1}")));
    }
    let gamma = match s2 {
        None => f64::INFINITY,
        Some(s2) if !(s2.is_finite() && s2 > 0.0) => {
            return Err(Error::contract(format!("s2 must be positive, got {s2}")))
        }
        Some(s2) if s2 > s1 => return Err(Error::contract(format!("scores not sorted: s2 = {s2} > s1 = {s1}"))),
        Some(s2) => s1 / s2,
    };
    Ok(ObjectnessPair { s1, s2, gamma })
}

/// Orders records by descending objectness ratio, ties by image id.
pub fn rank_by_ratio(records: &[EmbeddingRecord]) -> Result<Vec<&EmbeddingRecord>> {
    let mut keyed = records
        .iter()
        .map(|r| Ok((r.objectness_pair()?.gamma, r)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|(ga, a), (gb, b)| gb.total_cmp(ga).then_with(|| a.image_id.cmp(&b.image_id)));
    Ok(keyed.into_iter().map(|(_, r)| r).collect())
}

/// Keeps records whose top-objectness box is also the top text-prompt box.
///
/// Skipped (everything kept) when any record lacks a text ranking.
pub fn filter_text_agreement(records: Vec<&EmbeddingRecord>) -> Vec<&EmbeddingRecord> {
    if let Some(r) = records.iter().find(|r| r.text_top_index.is_none()) {
        log::warn!(
            "record `{}` has no text_top_index; skipping text-agreement filter",
            r.image_id
        );
        return records;
    }
    records
        .into_iter()
        .filter(|r| r.top_box().map(|b| b.index) == r.text_top_index)
        .collect()
}

/// Unit-norm prototype for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub class_id: usize,
    pub vector: Vec<f32>,
    pub k_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingOptions {
    pub k: usize,
    pub filter_text: bool,
    /// Cap on images considered per class, taken in image-id order.
    pub max_images: Option<usize>,
}

impl Default for EmbeddingOptions {
    fn default() -> Self {
        EmbeddingOptions {
            k: 20,
            filter_text: false,
            max_images: None,
        }
    }
}

pub fn build_class_embedding(
    class_id: usize,
    records: &[EmbeddingRecord],
    opts: &EmbeddingOptions,
) -> Result<ClassEmbedding> {
    if opts.k == 0 {
        return Err(Error::contract("k must be positive"));
    }
    if let Some(r) = records.iter().find(|r| r.class_id != class_id) {
        return Err(Error::contract(format!(
            "record `{}` belongs to class {}, not {class_id}",
            r.image_id, r.class_id
        )));
    }
    let capped: Vec<EmbeddingRecord>;
    let pool = match opts.max_images {
        Some(n) if n < records.len() => {
            let mut sorted: Vec<&EmbeddingRecord> = records.iter().collect();
            sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            capped = sorted.into_iter().take(n).cloned().collect();
            &capped[..]
        }
        _ => records,
    };

    let mut ranked = rank_by_ratio(pool)?;
    if opts.filter_text {
        ranked = filter_text_agreement(ranked);
    }
    let chosen: Vec<&EmbeddingRecord> = ranked.into_iter().take(opts.k).collect();
    if chosen.is_empty() {
        return Err(Error::EmptyClass { class_id });
    }

    let dim = chosen[0].boxes[0].vector.len();
    let mut sum = vec![0f64; dim];
    for r in &chosen {
        let v = &r.boxes[0].vector;
        if v.len() != dim {
            return Err(Error::rejected(
                &r.image_id,
                format!("embedding dimension {} differs from {dim}", v.len()),
            ));
        }
        sum.iter_mut().zip(v).for_each(|(s, &x)| *s += x as f64);
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::contract(format!("class {class_id} embeddings cancel to zero")));
    }
    Ok(ClassEmbedding {
        class_id,
        vector: sum.iter().map(|x| (x / norm) as f32).collect(),
        k_used: chosen.len(),
    })
}

/// One prototype per class present in `records`, in class order.
pub fn build_class_embeddings(records: &[EmbeddingRecord], opts: &EmbeddingOptions) -> Result<Vec<ClassEmbedding>> {
    let mut by_class: BTreeMap<usize, Vec<EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_id).or_default().push(r.clone());
    }
    by_class
        .into_par_iter()
        .map(|(class_id, recs)| build_class_embedding(class_id, &recs, opts))
        .collect()
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Position of the box most cosine-similar to `query`; ties go to the lower position.
pub fn select_box_for_query<V: AsRef<[f32]>>(boxes: &[V], query: &[f32]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        let c = cosine_similarity(b.as_ref(), query)?;
        if best.is_none_or(|(_, bc)| c.partial_cmp(&bc) == Some(Ordering::Greater)) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::contract("no boxes to select from"))
}

/// Class-specific box chosen for one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Localization {
    pub image_id: String,
    pub class_id: usize,
    pub box_index: usize,
    pub cosine: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

pub fn localize(record: &EmbeddingRecord, query: &[f32]) -> Result<Localization> {
    let vectors: Vec<&[f32]> = record.boxes.iter().map(|b| b.vector.as_slice()).collect();
    let pos = select_box_for_query(&vectors, query).map_err(|e| Error::rejected(&record.image_id, e.to_string()))?;
    let chosen = &record.boxes[pos];
    Ok(Localization {
        image_id: record.image_id.clone(),
        class_id: record.class_id,
        box_index: chosen.index,
        cosine: cosine_similarity(&chosen.vector, query)?,
        bbox: chosen.bbox,
    })
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BoxWire {
    index: usize,
    objectness: f32,
    embedding: FloatArray,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecordWire {
    image_id: String,
    class_id: usize,
    boxes: Vec<BoxWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_top_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_box: Option<BBox>,
}

#[derive(Serialize, Deserialize)]
struct ClassEmbeddingWire {
    class_id: usize,
    k_used: usize,
    vector: FloatArray,
}

pub fn parse_embedding_record(line: &str, line_no: usize) -> Result<EmbeddingRecord> {
    let malformed = |reason: String| Error::Malformed { line: line_no, reason };
    let wire: EmbeddingRecordWire = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let mut boxes = Vec::with_capacity(wire.boxes.len());
    for b in wire.boxes {
        let vector = b.embedding.decode().map_err(malformed)?;
        let norm = vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(Error::rejected(
                &wire.image_id,
                format!("box {} embedding has norm {norm}, expected unit norm", b.index),
            ));
        }
        if !(b.objectness.is_finite() && b.objectness > 0.0) {
            return Err(Error::rejected(
                &wire.image_id,
                format!("box {} objectness {} must be positive", b.index, b.objectness),
            ));
        }
        boxes.push(BoxEmbedding {
            index: b.index,
            objectness: b.objectness,
            vector,
            bbox: b.bbox,
        });
    }
    if boxes.windows(2).any(|w| w[0].objectness < w[1].objectness) {
        log::warn!("line {line_no}: boxes of `{}` re-sorted by objectness", wire.image_id);
        boxes.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
    }
    Ok(EmbeddingRecord {
        image_id: wire.image_id,
        class_id: wire.class_id,
        boxes,
        text_top_index: wire.text_top_index,
        gt_box: wire.gt_box,
    })
}

pub fn embedding_record_to_line(record: &EmbeddingRecord) -> String {
    let wire = EmbeddingRecordWire {
        image_id: record.image_id.clone(),
        class_id: record.class_id,
        boxes: record
            .boxes
            .iter()
            .map(|b| BoxWire {
                index: b.index,
                objectness: b.objectness,
                embedding: FloatArray::encode(&b.vector),
                bbox: b.bbox,
            })
            .collect(),
        text_top_index: record.text_top_index,
        gt_box: record.gt_box,
    };
    serde_json::to_string(&wire).expect("embedding records serialize")
}

pub fn read_embedding_records<R: BufRead>(reader: R) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_embedding_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn class_embedding_to_line(e: &ClassEmbedding) -> String {
    let wire = ClassEmbeddingWire {
        class_id: e.class_id,
        k_used: e.k_used,
        vector: FloatArray::encode(&e.vector),
    };
    serde_json::to_string(&wire).expect("class embeddings serialize")
}

pub fn read_class_embeddings<R: BufRead>(reader: R) -> Result<Vec<ClassEmbedding>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed { line: i + 1, reason };
        let wire: ClassEmbeddingWire = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        out.push(ClassEmbedding {
            class_id: wire.class_id,
            vector: wire.vector.decode().map_err(malformed)?,
            k_used: wire.k_used,
        });
    }
    Ok(out)
}

pub fn write_class_embeddings<W: Write>(mut w: W, embeddings: &[ClassEmbedding]) -> Result<()> {
    for e in embeddings {
        writeln!(w, "{}", class_embedding_to_line(e))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn rec(id: &str, scores: &[f32], top: &[f32]) -> EmbeddingRecord {
        EmbeddingRecord {
            image_id: id.into(),
            class_id: 3,
            boxes: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| BoxEmbedding {
                    index: i,
                    objectness: s,
                    vector: if i == 0 { unit(top) } else { unit(&[0.0, 0.0, 1.0]) },
                    bbox: None,
                })
                .collect(),
            text_top_index: None,
            gt_box: None,
        }
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(objectness_ratio(0.8, Some(0.4)).unwrap().gamma, 2.0);
        assert_eq!(objectness_ratio(0.5, Some(0.5)).unwrap().gamma, 1.0);
        let lone = objectness_ratio(0.9, None).unwrap();
        assert!(lone.gamma.is_infinite() && lone.gamma > 0.0);
        assert!(objectness_ratio(0.4, Some(0.8)).is_err());
        assert!(objectness_ratio(0.0, None).is_err());
    }

    #[test]
    fn ranking_order() {
        let recs = vec![
            rec("a", &[0.6, 0.5], &[1.0, 0.0, 0.0]),
            rec("b", &[0.9], &[1.0, 0.0, 0.0]),
            rec("c", &[0.9, 0.3], &[1.0, 0.0, 0.0]),
        ];
        let ids: Vec<&str> = rank_by_ratio(&recs)
            .unwrap()
            .iter()
            .map(|r| r.image_id.as_str())
            .collect();
        assert_eq!(ids, ["b", "c", "a"]);
    }

    #[test]
    fn ranking_ties_use_image_id() {
        let recs = vec![
            rec("z", &[0.8, 0.4], &[1.0, 0.0, 0.0]),
            rec("m", &[0.4, 0.2], &[1.0, 0.0, 0.0]),
            rec("a", &[0.6, 0.3], &[1.0, 0.0, 0.0]),
        ];
        let ids: Vec<&str> = rank_by_ratio(&recs)
            .unwrap()
            .iter()
            .map(|r| r.image_id.as_str())
            .collect();
        assert_eq!(ids, ["a", "m", "z"]);
    }

    #[test]
    fn text_filter() {
        let mut keep = rec("k", &[0.9, 0.2], &[1.0, 0.0, 0.0]);
        keep.text_top_index = Some(0);
        let mut drop = rec("d", &[0.9, 0.2], &[1.0, 0.0, 0.0]);
        drop.text_top_index = Some(2);
        let out = filter_text_agreement(vec![&keep, &drop]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].image_id, "k");
        assert_eq!(filter_text_agreement(out.clone()), out);

        let missing = rec("m", &[0.9], &[1.0, 0.0, 0.0]);
        assert_eq!(filter_text_agreement(vec![&keep, &drop, &missing]).len(), 3);
    }

    #[test]
    fn single_record_is_identity() {
        let r = rec("x", &[0.9, 0.1], &[0.6, 0.8, 0.0]);
        let e = build_class_embedding(3, std::slice::from_ref(&r), &EmbeddingOptions::default()).unwrap();
        assert_eq!(e.k_used, 1);
        assert_eq!(e.vector, r.boxes[0].vector);
    }

    #[test]
    fn k_truncates_to_available() {
        let recs: Vec<_> = (0..7)
            .map(|i| {
                rec(
                    &format!("i{i}"),
                    &[0.9, 0.1 + 0.05 * i as f32],
                    &[1.0, i as f32 * 0.1, 0.0],
                )
            })
            .collect();
        let e = build_class_embedding(
            3,
            &recs,
            &EmbeddingOptions {
                k: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(e.k_used, 7);
        let norm: f64 = e.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn top_k_uses_best_ratios() {
        let recs = vec![
            rec("clean", &[0.9, 0.1], &[1.0, 0.0, 0.0]),
            rec("busy", &[0.5, 0.45], &[0.0, 1.0, 0.0]),
        ];
        let e = build_class_embedding(
            3,
            &recs,
            &EmbeddingOptions {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(e.vector, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_images_caps_by_id() {
        let recs = vec![
            rec("b", &[0.9, 0.1], &[1.0, 0.0, 0.0]),
            rec("a", &[0.5, 0.45], &[0.0, 1.0, 0.0]),
        ];
        let opts = EmbeddingOptions {
            k: 5,
            max_images: Some(1),
            ..Default::default()
        };
        let e = build_class_embedding(3, &recs, &opts).unwrap();
        assert_eq!(e.vector, vec![0.0, 1.0, 0.0]);
        assert_eq!(e.k_used, 1);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(
            build_class_embedding(3, &[], &EmbeddingOptions::default()),
            Err(Error::EmptyClass { class_id: 3 })
        ));
        let mut r = rec("x", &[0.9], &[1.0, 0.0, 0.0]);
        r.text_top_index = Some(1);
        let opts = EmbeddingOptions {
            filter_text: true,
            ..Default::default()
        };
        assert!(matches!(
            build_class_embedding(3, &[r.clone()], &opts),
            Err(Error::EmptyClass { .. })
        ));
        assert!(build_class_embedding(4, &[r], &EmbeddingOptions::default()).is_err());
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3f32, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn query_selection() {
        let boxes = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        assert_eq!(select_box_for_query(&boxes, &[0.0, 1.0]).unwrap(), 1);
        assert_eq!(select_box_for_query(&boxes, &boxes[0]).unwrap(), 0);
        let same = vec![vec![1.0f32, 0.0], vec![1.0, 0.0]];
        assert_eq!(select_box_for_query(&same, &[1.0, 0.0]).unwrap(), 0);
        assert!(select_box_for_query::<Vec<f32>>(&[], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn wire_round_trip() {
        let mut r = rec("w", &[0.9, 0.3], &[0.6, 0.8, 0.0]);
        r.boxes[1].bbox = Some(BBox::new(0.1, 0.2, 0.3, 0.4));
        r.text_top_index = Some(0);
        let line = embedding_record_to_line(&r);
        assert_eq!(parse_embedding_record(&line, 1).unwrap(), r);

        let e = ClassEmbedding {
            class_id: 2,
            vector: unit(&[1.0; 80]),
            k_used: 4,
        };
        let mut buf = Vec::new();
        write_class_embeddings(&mut buf, std::slice::from_ref(&e)).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("f32le"));
        assert_eq!(read_class_embeddings(&buf[..]).unwrap(), vec![e]);
    }

    #[test]
    fn non_unit_embedding_rejected() {
        let line = r#"{"image_id":"q","class_id":0,"boxes":[{"index":0,"objectness":0.5,"embedding":[1.0,1.0]}]}"#;
        assert!(matches!(parse_embedding_record(line, 1), Err(Error::Rejected { .. })));
    }
}
