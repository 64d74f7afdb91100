//! Error type for the data pipeline.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class directory missing: {0}")]
    MissingClassDir(PathBuf),
    #[error("not a directory: {0}")]
    NotADirectory(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv {path}: column {column:?} not found in header")]
    MissingColumn { path: PathBuf, column: String },
    #[error("csv {path}: {source}")]
    Csv {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("image has zero pixels: {0}")]
    EmptyImage(String),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("validation fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("split infeasible: pool of {pool} with fraction {fraction} leaves an empty side")]
    SplitInfeasible { pool: usize, fraction: f64 },
    #[error("crop {crop:?} exceeds padded size {padded:?}")]
    InfeasibleCrop {
        crop: (usize, usize),
        padded: (usize, usize),
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(usize),
}
