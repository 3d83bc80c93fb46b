use thiserror::Error;

use crate::atlas::RuleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("orientation mismatch: source {source_codes} vs target {target_codes}")]
    OrientationMismatch {
        source_codes: String,
        target_codes: String,
    },
    #[error("trilinear interpolation is not defined for label volumes")]
    TrilinearLabels,
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("mask is not binary: found label {0}")]
    NonBinaryMask(u32),
    #[error("nifti: {0}")]
    Nifti(String),
    #[error("liver statistics unavailable: {0}")]
    LiverStatsUnavailable(String),
    #[error("degenerate liver reference: {0}")]
    DegenerateLiver(String),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("reference table: {0}")]
    Reference(String),
    #[error("duplicate patient id {0:?}")]
    DuplicatePatient(String),
    #[error("no predictions to evaluate")]
    NoPredictions,
    #[error("phantom: {0}")]
    Phantom(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable machine-readable class, emitted by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid-grid",
            Error::GridMismatch(_) => "grid-mismatch",
            Error::OrientationMismatch { .. } => "orientation-mismatch",
            Error::TrilinearLabels => "trilinear-labels",
            Error::InvalidVolume(_) => "invalid-volume",
            Error::NonBinaryMask(_) => "non-binary-mask",
            Error::Nifti(_) => "nifti",
            Error::LiverStatsUnavailable(_) => "liver-stats-unavailable",
            Error::DegenerateLiver(_) => "degenerate-liver",
            Error::Rules(_) => "rule-file",
            Error::InvalidCounts(_) => "invalid-counts",
            Error::Reference(_) => "reference-table",
            Error::DuplicatePatient(_) => "duplicate-patient",
            Error::NoPredictions => "no-predictions",
            Error::Phantom(_) => "phantom",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
