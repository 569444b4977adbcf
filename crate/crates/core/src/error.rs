use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the merge toolchain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("header error: {0}")]
    Header(#[from] HeaderError),

    #[error("tensor not found: {0}")]
    TensorNotFound(String),

    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),

    #[error("shape mismatch for {name}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("raw length {len} is not a multiple of {dtype} element size")]
    RawLength { len: usize, dtype: crate::Dtype },

    #[error("{0}")]
    Keymap(String),

    #[error("alignment failed for {name}: {reason}")]
    Alignment { name: String, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("recipe error: {0}")]
    Recipe(String),

    #[error("{stage} failed for tensor {tensor}: {source}")]
    Stage {
        stage: Stage,
        tensor: String,
        #[source]
        source: Box<Error>,
    },
}

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Extract,
    Align,
    Trim,
    Merge,
    Inject,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Extract => "extract",
            Stage::Align => "align",
            Stage::Trim => "trim",
            Stage::Merge => "merge",
            Stage::Inject => "inject",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

/// Header validation failures. Each corruption class has its own variant so
/// callers (and tests) can tell them apart.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeaderError {
    #[error("file too small to hold the 8-byte header length ({0} bytes)")]
    TooSmall(u64),
    #[error("header length {len} exceeds cap {cap}")]
    TooLarge { len: u64, cap: u64 },
    #[error("header length {len} runs past end of file ({file_len} bytes)")]
    Truncated { len: u64, file_len: u64 },
    #[error("malformed header json: {0}")]
    Json(String),
    #[error("unknown dtype {dtype:?} for tensor {name}")]
    UnknownDtype { name: String, dtype: String },
    #[error("duplicate tensor name in header: {0}")]
    DuplicateName(String),
    #[error("tensor {name}: data_offsets [{begin}, {end}] hold {actual} bytes, shape needs {expected}")]
    ExtentMismatch {
        name: String,
        begin: u64,
        end: u64,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {name}: data_offsets [{begin}, {end}] are descending")]
    Descending { name: String, begin: u64, end: u64 },
    #[error("tensor {name} overlaps the previous tensor (starts at {begin}, previous ends at {prev_end})")]
    Overlap { name: String, begin: u64, prev_end: u64 },
    #[error("gap before tensor {name} (starts at {begin}, previous ends at {prev_end})")]
    Gap { name: String, begin: u64, prev_end: u64 },
    #[error("tensor {name} ends at {end}, past the data region ({data_len} bytes)")]
    ExtentPastEnd { name: String, end: u64, data_len: u64 },
    #[error("data region has {data_len} bytes but tensors only cover {covered}")]
    TrailingData { covered: u64, data_len: u64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, stage: Stage, tensor: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            tensor: tensor.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by bad caller input (recipes, parameters,
    /// rules) rather than unreadable or malformed files.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Header(_) | Error::RawLength { .. } => false,
            Error::Stage { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
