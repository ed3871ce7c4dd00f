// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {tensor}: expected {expected}, got {got}")]
    Dimension {
        tensor: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("vectors are not orthogonal: |<a,b>| = {inner:e} exceeds {tol:e}")]
    NotOrthogonal { inner: f64, tol: f64 },

    #[error("unknown environment label `{0}`")]
    UnknownEnvironment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("gauge map rejected: {0}")]
    Gauge(String),

    #[error("undefined effect size: pooled standard deviation is zero")]
    UndefinedEffect,

    #[error("undefined correlation: zero variance in {0}")]
    UndefinedCorrelation(&'static str),

    #[error("degenerate baseline: {0}")]
    DegenerateBaseline(String),

    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("prompt {prompt}: {source}")]
    AtPrompt {
        prompt: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("truncated payload {file}: expected {expected} bytes, found {found}")]
    Truncated {
        file: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("shape/byte disagreement for entry `{name}`: {detail}")]
    ShapeBytes { name: String, detail: String },

    #[error("missing arm `{arm}` for prompt {prompt}")]
    MissingArm { arm: String, prompt: usize },

    #[error("invalid dump: {0}")]
    InvalidDump(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Degenerate,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(tensor: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            tensor,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn at_prompt(self, prompt: usize) -> Self {
        Error::AtPrompt {
            prompt,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DegenerateVector(_)
            | Error::UndefinedEffect
            | Error::UndefinedCorrelation(_)
            | Error::DegenerateBaseline(_)
            | Error::InsufficientSamples { .. }
            | Error::NonFinite { .. } => ErrorClass::Degenerate,
            Error::Io { .. }
            | Error::Csv(_)
            | Error::Truncated { .. }
            | Error::FormatVersion { .. }
            | Error::ShapeBytes { .. }
            | Error::InvalidDump(_)
            | Error::MissingArm { .. } => ErrorClass::Io,
            Error::AtPrompt { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }
}
