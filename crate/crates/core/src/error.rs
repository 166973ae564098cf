// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use crate::dumpio::Direction;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong between reading a dump and applying an edit.
///
/// Variants are split so that callers (and the CLI exit-code mapping) can
/// tell I/O trouble apart from malformed input.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // -- dump container --
    #[error("bad magic: expected \"DPNA\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dump version {0} (this build reads version 1)")]
    UnsupportedVersion(u32),
    #[error("truncated header: file is {len} bytes")]
    TruncatedHeader { len: u64 },
    #[error("offset out of bounds: {what} needs bytes {start}..{end}, file has {len}")]
    OffsetOutOfBounds {
        what: String,
        start: u64,
        end: u64,
        len: u64,
    },
    #[error("overlapping tensor regions: {first} and {second}")]
    OverlappingRegions { first: String, second: String },
    #[error("non-finite value {value} at layer {layer} ({direction}), sample {sample}, neuron {neuron}")]
    NonFinite {
        layer: usize,
        direction: Direction,
        sample: usize,
        neuron: usize,
        value: f32,
    },
    #[error("malformed metadata: {0}")]
    Metadata(String),
    #[error("invalid dump: {0}")]
    InvalidDump(String),

    // -- statistics / selection / intervention --
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not enough samples: {0}")]
    InsufficientSamples(String),
    #[error("layer {0} not present")]
    MissingLayer(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("neuron index {index} out of range for width {width}")]
    IndexOutOfRange { index: usize, width: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    // -- analysis --
    #[error("degenerate input: {0}")]
    Degenerate(String),

    // -- file formats --
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. })
    }
}
