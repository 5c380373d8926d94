//! Domain types, record streams and the probability helpers shared by every stage.

mod prob;
mod stream;
mod types;
mod validate;

pub use prob::{argmax, softmax, top_prediction};
pub use stream::{
    check_dimensions, parse_record, parse_record_raw, read_records, record_to_line, write_records, FloatArray,
    RecordReader, PACK_THRESHOLD,
};
pub use types::{BBox, Candidate, DatasetManifest, ImageRecord, Metric, Prediction, View};
pub use validate::{validate_record, Finding, Severity, ValidationReport, BOX_POLICY_THRESHOLD};
