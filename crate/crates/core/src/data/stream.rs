//! Line-delimited JSON record streams.
//!
//! Each line holds one [`ImageRecord`]:
//!
//! ```text
//! {"image_id":"n01440764_18","candidates":[{"index":0,"bbox":[0.1,0.2,0.8,0.9],"objectness":0.93}],
//!  "logits":{"FULL":[...],"CANDIDATE:0":{"dtype":"f32le","data":"AACAPw..."}},
//!  "gt_labels":[0],"metadata":{"habitat":"forest"}}
//! ```
//!
//! Float arrays are either decimal lists or base64 little-endian `f32`
//! payloads tagged `"dtype":"f32le"`. Writers pack vectors of length
//! [`PACK_THRESHOLD`] or more.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Candidate, DatasetManifest, ImageRecord, View};
use crate::error::{Error, Result};

/// Vectors at least this long are written as base64 payloads.
pub const PACK_THRESHOLD: usize = 64;

/// Float vector as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FloatArray {
    List(Vec<f32>),
    Packed { dtype: String, data: String },
}

impl FloatArray {
    pub fn encode(values: &[f32]) -> FloatArray {
        if values.len() >= PACK_THRESHOLD {
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            FloatArray::Packed {
                dtype: "f32le".into(),
                data: STANDARD.encode(bytes),
            }
        } else {
            FloatArray::List(values.to_vec())
        }
    }

    pub fn decode(self) -> std::result::Result<Vec<f32>, String> {
        match self {
            FloatArray::List(v) => Ok(v),
            FloatArray::Packed { dtype, data } => {
                if dtype != "f32le" {
                    return Err(format!("unsupported dtype `{dtype}`"));
                }
                let bytes = STANDARD.decode(data).map_err(|e| format!("bad base64 payload: {e}"))?;
                if bytes.len() % 4 != 0 {
                    return Err(format!("f32le payload of {} bytes is not a multiple of 4", bytes.len()));
                }
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect())
            }
        }
    }
}

/// Metadata values may arrive as strings, numbers or booleans; all are kept as text.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MetaValue {
    Text(String),
    Number(serde_json::Number),
    Flag(bool),
}

impl MetaValue {
    fn into_string(self) -> String {
        match self {
            MetaValue::Text(s) => s,
            MetaValue::Number(n) => n.to_string(),
            MetaValue::Flag(b) => b.to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateWire {
    index: usize,
    bbox: BBox,
    objectness: f32,
}

#[derive(Debug, Deserialize)]
struct RecordIn {
    image_id: String,
    #[serde(default)]
    candidates: Vec<CandidateWire>,
    logits: BTreeMap<View, FloatArray>,
    gt_labels: Vec<usize>,
    #[serde(default)]
    metadata: BTreeMap<String, MetaValue>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    image_id: &'a str,
    candidates: &'a [Candidate],
    logits: BTreeMap<View, FloatArray>,
    gt_labels: &'a BTreeSet<usize>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    metadata: &'a BTreeMap<String, String>,
}

/// Parses one line into a canonical record.
///
/// `line_no` is 1-based and only used for error messages. Rejects
/// non-finite values, non-positive objectness and empty label sets; the
/// softer policy checks live in [`validate_record`](crate::data::validate_record).
pub fn parse_record(line: &str, line_no: usize) -> Result<ImageRecord> {
    let mut record = parse_record_raw(line, line_no)?;
    if record.canonicalize()? {
        log::warn!(
            "line {line_no}: candidates of `{}` were not sorted by objectness; re-sorted",
            record.image_id
        );
    }
    Ok(record)
}

/// Like [`parse_record`] but keeps candidates in their stored order, for
/// tools that report on the stream as written.
pub fn parse_record_raw(line: &str, line_no: usize) -> Result<ImageRecord> {
    let wire: RecordIn = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: line_no,
        reason: e.to_string(),
    })?;
    let id = wire.image_id;

    let mut logits = BTreeMap::new();
    for (view, arr) in wire.logits {
        let values = arr
            .decode()
            .map_err(|reason| Error::Malformed { line: line_no, reason })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::rejected(&id, format!("non-finite logit in view {view}")));
        }
        logits.insert(view, values);
    }
    let mut candidates = Vec::with_capacity(wire.candidates.len());
    for c in wire.candidates {
        if !(c.objectness.is_finite() && c.objectness > 0.0) {
            return Err(Error::rejected(
                &id,
                format!(
                    "candidate {} has objectness {} (must be finite and > 0)",
                    c.index, c.objectness
                ),
            ));
        }
        candidates.push(Candidate {
            index: c.index,
            bbox: c.bbox,
            objectness: c.objectness,
        });
    }
    if wire.gt_labels.is_empty() {
        return Err(Error::rejected(&id, "empty gt_labels"));
    }
    Ok(ImageRecord {
        image_id: id,
        candidates,
        logits,
        gt_labels: wire.gt_labels.into_iter().collect(),
        metadata: wire.metadata.into_iter().map(|(k, v)| (k, v.into_string())).collect(),
    })
}

/// Rejects records whose logit lengths or labels disagree with the manifest.
pub fn check_dimensions(record: &ImageRecord, manifest: &DatasetManifest) -> Result<()> {
    let classes = manifest.num_classes();
    for (view, values) in &record.logits {
        if values.len() != classes {
            return Err(Error::rejected(
                &record.image_id,
                format!(
                    "view {view} has {} logits, manifest has {classes} classes",
                    values.len()
                ),
            ));
        }
    }
    if let Some(&bad) = record.gt_labels.iter().find(|&&c| c >= classes) {
        return Err(Error::rejected(
            &record.image_id,
            format!("gt label {bad} outside [0, {classes})"),
        ));
    }
    Ok(())
}

/// Serializes one record as a single line without the trailing newline.
pub fn record_to_line(record: &ImageRecord) -> String {
    let out = RecordOut {
        image_id: &record.image_id,
        candidates: &record.candidates,
        logits: record
            .logits
            .iter()
            .map(|(v, values)| (*v, FloatArray::encode(values)))
            .collect(),
        gt_labels: &record.gt_labels,
        metadata: &record.metadata,
    };
    serde_json::to_string(&out).expect("records serialize")
}

/// Iterator over the records of a stream. Blank lines are skipped.
pub struct RecordReader<'m, R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    manifest: Option<&'m DatasetManifest>,
}

impl<'m, R: BufRead> RecordReader<'m, R> {
    pub fn new(reader: R, manifest: Option<&'m DatasetManifest>) -> Self {
        RecordReader {
            lines: reader.lines(),
            line_no: 0,
            manifest,
        }
    }
}

impl<R: BufRead> Iterator for RecordReader<'_, R> {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = parse_record(&line, self.line_no).and_then(|r| {
                if let Some(m) = self.manifest {
                    check_dimensions(&r, m)?;
                }
                Ok(r)
            });
            return Some(parsed);
        }
    }
}

/// Reads a whole stream; stops at the first bad line.
pub fn read_records<R: BufRead>(reader: R, manifest: Option<&DatasetManifest>) -> Result<Vec<ImageRecord>> {
    RecordReader::new(reader, manifest).collect()
}

pub fn write_records<'a, W, I>(mut writer: W, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a ImageRecord>,
{
    for r in records {
        writer.write_all(record_to_line(r).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Metric;

    const LINE: &str = r#"{"image_id":"a","candidates":[{"index":0,"bbox":[0.1,0.1,0.6,0.7],"objectness":0.9},{"index":1,"bbox":[0.0,0.5,0.3,1.0],"objectness":0.4}],"logits":{"FULL":[0.5,1.0,-2.0],"CANDIDATE:0":[1.5,0.0,0.0],"CANDIDATE:1":[0.0,0.25,3.0]},"gt_labels":[0],"metadata":{"habitat":"forest"}}"#;

    fn manifest(classes: usize) -> DatasetManifest {
        DatasetManifest {
            dataset_name: "t".into(),
            class_names: (0..classes).map(|i| format!("c{i}")).collect(),
            metric: Metric::Total,
            group_field: None,
        }
    }

    #[test]
    fn empty_stream() {
        assert!(read_records(&b""[..], None).unwrap().is_empty());
        assert!(read_records(&b"\n\n"[..], None).unwrap().is_empty());
    }

    #[test]
    fn canonical_line_round_trips() {
        let r = parse_record(LINE, 1).unwrap();
        assert_eq!(record_to_line(&r), LINE);
    }

    #[test]
    fn unsorted_candidates_are_resorted() {
        let line = r#"{"image_id":"b","candidates":[{"index":0,"bbox":[0,0,1,1],"objectness":0.3},{"index":1,"bbox":[0,0,0.5,0.5],"objectness":0.8}],"logits":{"FULL":[0,1],"CANDIDATE:0":[5,0],"CANDIDATE:1":[0,5]},"gt_labels":[1]}"#;
        let r = parse_record(line, 1).unwrap();
        assert_eq!(r.candidates[0].objectness, 0.8);
        assert_eq!(r.candidates[0].bbox, BBox::new(0.0, 0.0, 0.5, 0.5));
        assert_eq!(r.view(View::Candidate(0)).unwrap(), &[0.0, 5.0]);
    }

    #[test]
    fn packed_and_listed_floats_agree() {
        let values: Vec<f32> = (0..70).map(|i| i as f32 * 0.37 - 9.0).collect();
        let packed = FloatArray::encode(&values);
        assert!(matches!(packed, FloatArray::Packed { .. }));
        assert_eq!(packed.decode().unwrap(), values);
        assert!(matches!(FloatArray::encode(&values[..63]), FloatArray::List(_)));

        let bad = FloatArray::Packed {
            dtype: "f16".into(),
            data: String::new(),
        };
        assert!(bad.decode().is_err());
        let short = FloatArray::Packed {
            dtype: "f32le".into(),
            data: STANDARD.encode([0u8; 5]),
        };
        assert!(short.decode().is_err());
    }

    #[test]
    fn packed_nan_is_rejected() {
        let data = STANDARD.encode(f32::NAN.to_le_bytes());
        let line =
            format!(r#"{{"image_id":"n","logits":{{"FULL":{{"dtype":"f32le","data":"{data}"}}}},"gt_labels":[0]}}"#);
        assert!(matches!(parse_record(&line, 3), Err(Error::Rejected { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let stream = format!("{LINE}\n{{not json\n");
        let err = read_records(stream.as_bytes(), None).unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_names_image() {
        let err = read_records(LINE.as_bytes(), Some(&manifest(4))).unwrap_err();
        match err {
            Error::Rejected { image_id, .. } => assert_eq!(image_id, "a"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(read_records(LINE.as_bytes(), Some(&manifest(3))).unwrap().len(), 1);
    }

    #[test]
    fn label_range_checked() {
        let line = LINE.replace(r#""gt_labels":[0]"#, r#""gt_labels":[5]"#);
        assert!(read_records(line.as_bytes(), Some(&manifest(3))).is_err());
    }

    #[test]
    fn bad_objectness_and_labels_rejected() {
        let zero = LINE.replace("0.4}", "0.0}");
        assert!(parse_record(&zero, 1).is_err());
        let empty = LINE.replace(r#""gt_labels":[0]"#, r#""gt_labels":[]"#);
        assert!(parse_record(&empty, 1).is_err());
    }

    #[test]
    fn numeric_metadata_kept_as_text() {
        let line = LINE.replace(r#"{"habitat":"forest"}"#, r#"{"month":7,"wet":true}"#);
        let r = parse_record(&line, 1).unwrap();
        assert_eq!(r.metadata["month"], "7");
        assert_eq!(r.metadata["wet"], "true");
    }
}
