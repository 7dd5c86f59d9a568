use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the network engine, the state search and the data loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty layer spec list")]
    EmptySpec,
    #[error("layer {index}: {reason}")]
    Layer { index: usize, reason: String },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape { expected: Vec<usize>, found: Vec<usize> },
    #[error("state length {found} does not match unit count {expected}")]
    StateLength { expected: usize, found: usize },
    #[error("nothing prunable: network has no conv filters or hidden dense units")]
    NothingPrunable,
    #[error("target {target} out of range for {classes} classes")]
    Target { target: usize, classes: usize },
    #[error("population size {0} is too small, binary DE needs at least 4")]
    PopulationTooSmall(usize),
    #[error("empty population")]
    EmptyPopulation,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("landscape enumeration refused: D = {0} exceeds the cap of {max}", max = crate::oracle::MAX_LANDSCAPE_UNITS)]
    LandscapeTooLarge(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}: bad magic number, expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelRange { index: usize, label: usize, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid state string: {0}")]
    StateParse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
