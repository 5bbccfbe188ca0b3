//! Crate-wide error type and result alias.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- configuration and input ----
    #[error("configuration error: {0}")]
    Config(String),

    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),

    #[error("{}:{line}: {msg}", path.display())]
    DatasetParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset `{name}`: {msg}")]
    DatasetInvalid { name: String, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // ---- prompts and templates ----
    #[error("instruction contains the reserved marker `<INS>`")]
    ReservedMarker,

    #[error("invalid prompt text: {0}")]
    InvalidPromptText(String),

    #[error("template `{template_id}`: {msg}")]
    Template { template_id: String, msg: String },

    #[error("completion contained no usable candidate instruction")]
    EmptyCandidate,

    #[error("candidate is {len} chars, over the {cap}-char cap")]
    CandidateTooLong { len: usize, cap: usize },

    #[error("prompt history is empty")]
    EmptyHistory,

    // ---- metrics ----
    #[error("metric weights sum to {sum}, expected 1.0")]
    WeightSum { sum: f64 },

    #[error("metrics require at least one record")]
    EmptyRecords,

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    // ---- backends ----
    #[error("backend `{backend}` does not expose token log-probabilities")]
    LogprobsUnsupported { backend: String },

    #[error("option letter `{letter}` missing from returned token vocabulary")]
    MissingOptionLogprob { letter: char },

    #[error("request budget of {limit} calls exhausted")]
    BudgetExhausted { limit: u64 },

    #[error("http status {status}: {detail}")]
    HttpStatus { status: u16, detail: String },

    #[error("http transport failure: {0}")]
    HttpTransport(String),

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("mock backend: {0}")]
    MockBackend(String),

    #[error("item `{item_id}`: {source}")]
    Eval {
        item_id: String,
        #[source]
        source: Box<Error>,
    },

    // ---- run store ----
    #[error("run `{0}` not found")]
    RunNotFound(String),

    #[error("run `{run_id}`: step {got} does not follow recorded step {last}")]
    StepRegression { run_id: String, last: u64, got: u64 },

    #[error("run `{run_id}`: step {step} already recorded with different content")]
    StepConflict { run_id: String, step: u64 },

    #[error("run `{run_id}` is already closed")]
    RunClosed { run_id: String },

    #[error("run `{run_id}` is incomplete: missing {file}")]
    RunIncomplete { run_id: String, file: String },

    #[error("run `{run_id}` failed integrity check: {msg}")]
    Integrity { run_id: String, msg: String },

    #[error("run `{run_id}` is locked by another writer")]
    RunLocked { run_id: String },

    #[error("run `{run_id}` is a {actual}-stage run, expected {expected}")]
    StageMismatch {
        run_id: String,
        expected: String,
        actual: String,
    },
}

impl Error {
    /// True when the failure originated in a backend call (network, budget,
    /// malformed completion) rather than in configuration or local input.
    /// The CLI maps backend failures to a distinct exit code.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            Error::LogprobsUnsupported { .. }
            | Error::MissingOptionLogprob { .. }
            | Error::BudgetExhausted { .. }
            | Error::HttpStatus { .. }
            | Error::HttpTransport(_)
            | Error::MalformedResponse(_)
            | Error::MockBackend(_) => true,
            Error::Eval { source, .. } => source.is_backend_failure(),
            _ => false,
        }
    }

    /// Wrap an I/O failure with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
