//! Error taxonomy.
//!
//! Failures are classified by the scope they affect: a single transaction,
//! the whole running system, an entire storage device, or one page. The
//! single-page class is the one this crate tries hard to contain; it only
//! escalates to [`FailureClass::Media`] when the inputs needed for
//! single-page recovery are themselves missing or damaged.

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

use crate::page::PageId;
use crate::wal::Lsn;

/// Scope of a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    Transaction,
    System,
    Media,
    SinglePage,
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureClass::Transaction => "transaction",
            FailureClass::System => "system",
            FailureClass::Media => "media",
            FailureClass::SinglePage => "single_page",
        };
        f.write_str(s)
    }
}

/// Why a page read was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionCause {
    ChecksumMismatch,
    WrongPageId { found: u64 },
    IoError(String),
    /// The page LSN on disk disagrees with the page recovery index.
    StalePageLsn { on_page: u64, expected: u64 },
    /// Cross-page structural check (fence keys, levels, foster chain).
    Structure(String),
    /// A redo record's per-page back pointer did not match the page LSN.
    ChainMismatch { expected: u64, found: u64 },
}

impl fmt::Display for DetectionCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectionCause::ChecksumMismatch => f.write_str("checksum mismatch"),
            DetectionCause::WrongPageId { found } => write!(f, "wrong page id {found}"),
            DetectionCause::IoError(e) => write!(f, "i/o error: {e}"),
            DetectionCause::StalePageLsn { on_page, expected } => {
                write!(f, "stale page lsn {on_page}, index expects {expected}")
            }
            DetectionCause::Structure(s) => write!(f, "structure: {s}"),
            DetectionCause::ChainMismatch { expected, found } => {
                write!(f, "per-page chain expects {expected}, page has {found}")
            }
        }
    }
}

/// A single-page failure noticed on the read path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedFailure {
    pub page: PageId,
    pub cause: DetectionCause,
}

impl fmt::Display for DetectedFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "single-page failure on page {}: {}", self.page, self.cause)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Detected(DetectedFailure),
    #[error("media failure: {0}")]
    Media(String),
    #[error("system failure: {0}")]
    System(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("key already exists")]
    DuplicateKey,
    #[error("key not found")]
    KeyNotFound,
    #[error("corrupt log record at lsn {lsn}: {reason}")]
    CorruptLog { lsn: Lsn, reason: String },
    #[error("store format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn class(&self) -> FailureClass {
        match self {
            Error::Detected(_) => FailureClass::SinglePage,
            Error::Media(_) => FailureClass::Media,
            Error::System(_) | Error::CorruptLog { .. } | Error::Io(_) | Error::Format(_) => {
                FailureClass::System
            }
            Error::Usage(_) | Error::DuplicateKey | Error::KeyNotFound => {
                FailureClass::Transaction
            }
        }
    }

    pub(crate) fn detected(page: PageId, cause: DetectionCause) -> Self {
        Error::Detected(DetectedFailure { page, cause })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
