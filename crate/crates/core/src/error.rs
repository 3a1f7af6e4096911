use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown operation `{0}`")]
    UnknownOp(String),

    #[error("invalid edit spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    ManifestLine { line: usize, message: String },

    #[error("record {record}: missing file {path}")]
    MissingFile { record: String, path: PathBuf },

    #[error("record {record}: checksum mismatch for {file}")]
    Checksum { record: String, file: String },

    #[error("record {record}: integrity check failed ({detail})")]
    Integrity { record: String, detail: String },

    #[error("record {record}: image decode failed: {detail}")]
    ImageDecode { record: String, detail: String },

    #[error("need at least 10 records to split, got {0}")]
    TooFewRecords(usize),

    #[error("template error: {0}")]
    Template(String),

    #[error("token `{0}` is already registered as special")]
    DuplicateSpecial(String),

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("sample has no value digit positions")]
    MissingDigitPositions,

    #[error("special token `{0}` needs at least one source token id")]
    EmptySourceTokens(String),

    #[error("vocabulary fingerprint mismatch: checkpoint {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate corrupted or inconsistent data on disk.
    pub fn is_data_integrity(&self) -> bool {
        matches!(
            self,
            Error::ManifestLine { .. }
                | Error::MissingFile { .. }
                | Error::Checksum { .. }
                | Error::Integrity { .. }
                | Error::ImageDecode { .. }
                | Error::Fingerprint { .. }
                | Error::Checkpoint(_)
        )
    }
}
