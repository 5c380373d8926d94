//! Robust context-aware object recognition over exported model outputs.
//!
//! The pipeline works on per-image records produced by an external exporter:
//! class-agnostic detector proposals with objectness scores, classifier logits
//! for the full image and for every proposal crop, and ground truth.
//!
//! * [`data`]: record types, line-delimited I/O, validation, softmax.
//! * [`fusion`]: foreground selection and FG/FULL fusion, plus ablation strategies.
//! * [`embedding`]: objectness-ratio class prototypes and query-based box selection.
//! * [`metrics`]: total, macro, multilabel and worst-group accuracy; IoU; delta reports.
//! * [`prior`]: metadata priors for reweighting classifier probabilities.
//! * [`synth`]: seeded synthetic worlds and brute-force reference implementations.
//!
//! ```
//! use std::collections::BTreeMap;
//! use rcor::data::{BBox, Candidate, ImageRecord, View};
//! use rcor::fusion::{run_pipeline, FullWeightMode, SelectionStrategy, Source};
//!
//! let mut logits = BTreeMap::new();
//! logits.insert(View::Full, vec![0.2, 0.0]);          // FULL leans weakly to class 0
//! logits.insert(View::Candidate(0), vec![0.0, 3.0]);  // the crop is confident in class 1
//! let record = ImageRecord {
//!     image_id: "example".into(),
//!     candidates: vec![Candidate { index: 0, bbox: BBox::new(0.2, 0.2, 0.8, 0.9), objectness: 0.9 }],
//!     logits,
//!     gt_labels: [1].into(),
//!     metadata: BTreeMap::new(),
//! };
//! let out = run_pipeline(&record, SelectionStrategy::Owmc, FullWeightMode::TopObjectness).unwrap();
//! assert_eq!(out.fused.source, Source::Fg);
//! assert_eq!(out.fused.prediction.class_id, 1);
//! ```

pub mod data;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod prior;
pub mod synth;

pub use error::{Error, Result};

// Snippets in the guide under `book/` compile and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/records.md")]
    mod records {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/class_embedding.md")]
    mod class_embedding {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/metadata_prior.md")]
    mod metadata_prior {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
