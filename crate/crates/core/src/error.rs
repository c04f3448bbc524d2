use std::io;

use thiserror::Error;

use crate::flow::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants are grouped by the exit code the command-line front end maps
/// them to: see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    // storage and integrity (exit 3)
    #[error("storage i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("repository not initialized at {0}")]
    NotInitialized(String),
    #[error("repository write lock is held by another writer ({0})")]
    LockHeld(String),
    #[error("integrity violation: {id} stored bytes hash to {actual}")]
    IntegrityViolation { id: String, actual: String },
    #[error("stored object for {0} is missing")]
    MissingObject(String),
    #[error("corrupt repository file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    // usage (exit 2)
    #[error("invalid configuration: {0}")]
    Config(String),

    // domain (exit 1)
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("invalid tuple: {0}")]
    InvalidTuple(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("manifest schema error: {0}")]
    Schema(String),
    #[error("flow is invalid: {}", format_violations(.0))]
    InvalidFlow(Vec<Violation>),
    #[error("cycle among steps [{}]", .0.join(", "))]
    Cycle(Vec<String>),
    #[error("unresolved input: {0}")]
    UnresolvedInput(String),
    #[error("executor failure: {0}")]
    Executor(String),
    #[error("step produced no output for declared slot `{slot}`")]
    MissingOutput { slot: String },
    #[error("unknown branch: {0}")]
    UnknownBranch(String),
    #[error("malformed event: {0}")]
    MalformedEvent(String),
    #[error("incomplete pins: missing {}", .0.join(", "))]
    IncompletePins(Vec<String>),
    #[error("dataset manifest is empty")]
    EmptyManifest,
    #[error("run not found: {0}")]
    RunNotFound(String),
    #[error("run {0} has not succeeded")]
    RunNotSucceeded(String),
    #[error("run {0} is not a validation run")]
    NotValidationRun(String),
    #[error("run {0} fails its gate policy")]
    GateFailed(String),
    #[error("run {0} already has a promotion decision")]
    AlreadyDecided(String),
    #[error("run {0} has no approved promotion")]
    NotApproved(String),
    #[error("run {0} was already released by {1}")]
    AlreadyReleased(String, String),
    #[error("malformed metrics document: {0}")]
    MalformedMetrics(String),
    #[error("runs are not aligned: component sets differ")]
    NotAligned,
    #[error("run {0} has no feedback bundle")]
    MissingFeedback(String),
    #[error("replay input missing or corrupt: {0}")]
    MissingInput(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    /// Exit code of the `ca` binary for this error: 1 domain, 2 usage,
    /// 3 storage or integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::NotInitialized(_)
            | Error::LockHeld(_)
            | Error::IntegrityViolation { .. }
            | Error::MissingObject(_)
            | Error::Corrupt { .. } => 3,
            Error::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn corrupt(path: impl AsRef<std::path::Path>, reason: impl ToString) -> Self {
        Error::Corrupt {
            path: path.as_ref().display().to_string(),
            reason: reason.to_string(),
        }
    }
}
