use std::path::PathBuf;

use thiserror::Error;

use crate::domain::GroundClass;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in field `{0}`")]
    NonFinite(String),

    #[error("arity mismatch: `{field}` has {actual} entries, expected {expected}")]
    ArityMismatch {
        field: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("negative measurement in field `{0}`")]
    NegativeMeasure(&'static str),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no samples survived cleansing")]
    EmptyAfterCleansing,

    #[error("non-uniform sampling at t = {timestamp} s: spacing {spacing} s, nominal {nominal} s")]
    NonUniformSampling {
        timestamp: f64,
        spacing: f64,
        nominal: f64,
    },

    #[error("channel `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("hyper-parameter grid is empty")]
    EmptyGrid,

    #[error("too few points: need at least {needed}, have {actual}")]
    TooFewPoints { needed: usize, actual: usize },

    #[error("k = {k} exceeds index size {size}")]
    KExceedsIndex { k: usize, size: usize },

    #[error("too few eligible neighbours: need {needed}, have {actual}")]
    TooFewEligibleNeighbors { needed: usize, actual: usize },

    #[error("unknown ground class `{0}`")]
    UnknownGroundClass(String),

    #[error("no model loaded for {0}")]
    ModelNotLoaded(GroundClass),

    #[error("missing model for {0}")]
    MissingModel(GroundClass),

    #[error("corpus fingerprint mismatch for {ground_class}: model expects {expected}, corpus is {actual}")]
    FingerprintMismatch {
        ground_class: GroundClass,
        expected: String,
        actual: String,
    },

    #[error("invalid simulator spec: {0}")]
    InvalidSpec(String),

    #[error("simulator session is closed")]
    SessionClosed,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable identifier for the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "NonFinite",
            Error::ArityMismatch { .. } => "ArityMismatch",
            Error::NegativeMeasure(_) => "NegativeMeasure",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::Parse { .. } => "ParseError",
            Error::EmptyAfterCleansing => "EmptyAfterCleansing",
            Error::NonUniformSampling { .. } => "NonUniformSampling",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InsufficientData(_) => "InsufficientData",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptyGrid => "EmptyGrid",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::KExceedsIndex { .. } => "KExceedsIndex",
            Error::TooFewEligibleNeighbors { .. } => "TooFewEligibleNeighbors",
            Error::UnknownGroundClass(_) => "UnknownGroundClass",
            Error::ModelNotLoaded(_) => "ModelNotLoaded",
            Error::MissingModel(_) => "MissingModel",
            Error::FingerprintMismatch { .. } => "FingerprintMismatch",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::SessionClosed => "SessionClosed",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}
