use std::io;

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A line of a record stream could not be parsed.
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },

    /// A record parsed but violates a data invariant.
    #[error("record `{image_id}` rejected: {reason}")]
    Rejected { image_id: String, reason: String },

    /// A selection strategy needs a synthesized view the record does not carry.
    #[error("strategy unavailable for `{image_id}`: missing view {view}")]
    StrategyUnavailable { image_id: String, view: String },

    /// A logit or probability vector is empty or carries non-finite entries.
    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    /// A class ended up with no usable records.
    #[error("class {class_id} has no usable records")]
    EmptyClass { class_id: usize },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn rejected(image_id: &str, reason: impl Into<String>) -> Self {
        Error::Rejected {
            image_id: image_id.to_owned(),
            reason: reason.into(),
        }
    }

    /// True when the failure came from the filesystem or a stream rather than the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
