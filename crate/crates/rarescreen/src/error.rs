use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage an error originated from. Stable mapping to CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dataset,
    Pca,
    Tsne,
    Density,
    Predictor,
    Evaluation,
    Preprocess,
    Synth,
    Io,
}

impl Stage {
    /// Process exit code associated with failures in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Dataset => 2,
            Stage::Pca => 3,
            Stage::Tsne => 4,
            Stage::Density => 5,
            Stage::Predictor => 6,
            Stage::Evaluation => 7,
            Stage::Preprocess => 8,
            Stage::Synth => 9,
            Stage::Io => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Pca => "pca",
            Stage::Tsne => "tsne",
            Stage::Density => "density",
            Stage::Predictor => "predictor",
            Stage::Evaluation => "evaluation",
            Stage::Preprocess => "preprocess",
            Stage::Synth => "synth",
            Stage::Io => "io",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("{path}:{row}: {message}")]
    MalformedRecord {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("malformed header in {path}: {message}")]
    MalformedHeader { path: PathBuf, message: String },

    #[error("sample ids do not match between features and labels: {message}")]
    SampleIdMismatch { message: String },

    #[error("duplicate sample id {id:?} at row {row}")]
    DuplicateSampleId { id: String, row: usize },

    #[error("M = {m} out of range (must be in 1..={n})")]
    MOutOfRange { m: usize, n: usize },

    #[error("{context}: expected vector of length {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("fewer distinct patients ({patients}) than folds ({folds})")]
    TooFewPatients { patients: usize, folds: usize },

    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: String, message: String },

    #[error("perplexity {perplexity} must be below the neighbor count {neighbors}")]
    PerplexityTooLarge { perplexity: f64, neighbors: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("optimization diverged at iteration {iteration}; cost trace: {trace:?}")]
    TsneDiverged { iteration: usize, trace: Vec<f64> },

    #[error("negative density input: F = {f}, F_bar = {f_bar}")]
    NegativeDensity { f: f64, f_bar: f64 },

    #[error("empty reference set")]
    EmptyReferenceSet,

    #[error(
        "neighbor set unstable: reference rows {a} and {b} are equidistant \
         (distances {da} and {db} differ by less than 1e-9)"
    )]
    UnstableNeighborSet { a: usize, b: usize, da: f64, db: f64 },

    #[error("gradient undefined: query coincides with reference row {index}")]
    ZeroDistanceNeighbor { index: usize },

    #[error("ROC undefined: scores contain a single class ({0})")]
    SingleClass(String),

    #[error("patient {patient} appears in both reference and predicted sets of fold {fold}")]
    PatientLeak { patient: String, fold: usize },

    #[error("image error: {0}")]
    Image(String),

    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it interrupted.
    pub fn in_stage(self, stage: Stage) -> Error {
        match self {
            Error::StageFailed { .. } => self,
            other => Error::StageFailed {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Stage attribution used by the CLI for exit codes and abort messages.
    pub fn stage(&self) -> Stage {
        match self {
            Error::StageFailed { stage, .. } => *stage,
            Error::FileNotFound(_)
            | Error::MalformedRecord { .. }
            | Error::MalformedHeader { .. }
            | Error::SampleIdMismatch { .. }
            | Error::DuplicateSampleId { .. }
            | Error::MOutOfRange { .. }
            | Error::TooFewPatients { .. } => Stage::Dataset,
            Error::PerplexityTooLarge { .. } | Error::TsneDiverged { .. } => Stage::Tsne,
            Error::NegativeDensity { .. } => Stage::Density,
            Error::EmptyReferenceSet
            | Error::UnstableNeighborSet { .. }
            | Error::ZeroDistanceNeighbor { .. } => Stage::Predictor,
            Error::SingleClass(_) | Error::PatientLeak { .. } => Stage::Evaluation,
            Error::Image(_) => Stage::Preprocess,
            Error::IoPath { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => Stage::Io,
            Error::DimensionMismatch { .. }
            | Error::TooFewSamples { .. }
            | Error::InvalidParameter { .. }
            | Error::NonFinite { .. } => Stage::Pca,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
