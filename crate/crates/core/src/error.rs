use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("gradient graph was not retained; call gradient(retain = true) before differentiating again")]
    NotRetained,

    #[error("gradient has not been computed on this tape")]
    NoGradient,

    #[error("non-finite value produced at node {node}")]
    NonFiniteNode { node: usize },

    #[error("non-finite quadratic form at probe {probe} (layer {layer})")]
    NonFiniteProbe { probe: usize, layer: usize },

    #[error("probe count must be at least 1")]
    ZeroProbes,

    #[error("layer index {layer} out of range (model has {layers} layer groups)")]
    InvalidLayer { layer: usize, layers: usize },

    #[error("cross block requires two distinct layers, got {0} twice")]
    SameLayer(usize),

    #[error("dense Hessian of dimension {dim} exceeds the cap {cap}; raise the cap to at least {dim}")]
    CapExceeded { dim: usize, cap: usize },

    #[error("invalid model spec (line {line}): {message}")]
    ModelParse { line: usize, message: String },

    #[error("invalid model spec: {0}")]
    InvalidModel(String),

    #[error("model has no tied-weight layer")]
    NoTiedWeights,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("negative Hessian statistic: {0}")]
    NegativeStatistic(String),

    #[error("snapshot grids differ from the reference grid for runs: {}", .0.join(", "))]
    GridMismatch(Vec<String>),

    #[error("step {step} is not on the baseline grid")]
    OffGrid { step: u64 },

    #[error("non-finite standardized value at step {step}")]
    NonFiniteScore { step: u64 },

    #[error("at least {needed} runs required, got {got}")]
    InsufficientRuns { needed: usize, got: usize },

    #[error("threshold bracket [{lo}, {hi}] does not reach target ARL0 {target}")]
    Bracket { lo: f64, hi: f64, target: f64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
