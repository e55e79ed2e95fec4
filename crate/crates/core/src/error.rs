use std::path::PathBuf;

use crate::graph::NodeId;

/// Errors raised across the quantization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error at node {node}: {detail}")]
    Shape { node: NodeId, detail: String },

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("operator `{op}` is not supported in the {regime} regime (node {node})")]
    UnsupportedOp { node: NodeId, op: &'static str, regime: &'static str },

    #[error("cycle detected through node {0}")]
    Cycle(NodeId),

    #[error("accumulator overflow at node {node}, element {index}")]
    Overflow { node: NodeId, index: usize },

    #[error("node {0} has no integer dtype annotation")]
    MissingAnnotation(NodeId),

    #[error("dtype error at node {node}: {detail}")]
    DType { node: NodeId, detail: String },

    #[error("hardware spec: {0}")]
    Spec(String),

    #[error("constraint violated at node {node}: {detail}")]
    Constraint { node: NodeId, detail: String },

    #[error("no hardware signature for node {node}: {detail}")]
    SignatureMismatch { node: NodeId, detail: String },

    #[error("search space has {size} candidates, above the cap of {cap}")]
    SpaceTooLarge { size: String, cap: u64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Errors caused by bad inputs (files, specs, strategies) rather than by a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Spec(_)
                | Error::Constraint { .. }
                | Error::SignatureMismatch { .. }
                | Error::Invalid(_)
                | Error::SpaceTooLarge { .. }
                | Error::Format(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Cycle(_)
                | Error::MissingInput(_)
        )
    }
}
