use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // ingest
    #[error("input is not valid UTF-8: {0}")]
    Decode(String),
    #[error("row {row} has {found} cells, header has {expected}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("header {0} is empty")]
    EmptyHeader(usize),
    #[error("line {line} has {found} tab-separated fields, expected 3")]
    BadArity { line: usize, found: usize },
    #[error("triple on line {0} has an empty component")]
    EmptyComponent(usize),
    #[error("table has no data rows")]
    EmptyTable,
    #[error("corpus is empty")]
    EmptyCorpus,

    // hypergraph
    #[error("triple ({0}, _, {0}) is a self loop")]
    SelfLoopUnsupported(String),
    #[error("unknown {side} id {id}")]
    UnknownId { side: &'static str, id: usize },
    #[error("invalid hypergraph: {0}")]
    InvalidGraph(String),

    // numerics
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("graph was built without a differentiation tape")]
    NoTape,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function returned {first} then {second} for identical parameters")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("gradient-check step {0} outside [1e-6, 1e-4]")]
    BadStep(f64),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),

    // models
    #[error("attention over an empty set")]
    EmptySet,
    #[error("node {0} has no incident hyperedges")]
    IsolatedNode(usize),
    #[error("hyperedge {0} has no incident nodes")]
    IsolatedHyperedge(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("soft prompt width {found} does not match model width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("LoRA rank {rank} exceeds min({d_in}, {d_out})")]
    RankTooLarge { rank: usize, d_in: usize, d_out: usize },

    // datagen / training
    #[error("no valid questions could be generated for table {0}")]
    NoValidQuestions(usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Decode(_) => "DecodeError",
            Error::RaggedRow { .. } => "RaggedRow",
            Error::EmptyHeader(_) => "EmptyHeader",
            Error::BadArity { .. } => "BadArity",
            Error::EmptyComponent(_) => "EmptyComponent",
            Error::EmptyTable => "EmptyTable",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::SelfLoopUnsupported(_) => "SelfLoopUnsupported",
            Error::UnknownId { .. } => "UnknownId",
            Error::InvalidGraph(_) => "InvalidGraph",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteInput(_) => "NonFiniteInput",
            Error::NoTape => "NoTape",
            Error::NonScalarLoss(_) => "NonScalarLoss",
            Error::NonDeterministicFunction { .. } => "NonDeterministicFunction",
            Error::BadStep(_) => "BadStep",
            Error::Checkpoint(_) => "Checkpoint",
            Error::UnknownParam(_) => "UnknownParam",
            Error::DuplicateParam(_) => "DuplicateParam",
            Error::EmptySet => "EmptySet",
            Error::IsolatedNode(_) => "IsolatedNode",
            Error::IsolatedHyperedge(_) => "IsolatedHyperedge",
            Error::Config(_) => "Config",
            Error::EmptyAnswer => "EmptyAnswer",
            Error::BatchTooSmall(_) => "BatchTooSmall",
            Error::WidthMismatch { .. } => "WidthMismatch",
            Error::RankTooLarge { .. } => "RankTooLarge",
            Error::NoValidQuestions(_) => "NoValidQuestions",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
