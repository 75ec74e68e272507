//! Relation-conditioned contrastive multimodal learning.
//!
//! Dual token-level encoders, relation-guided attention pooling and a
//! four-term contrastive objective, trained end-to-end on synthetic
//! relational data with a built-in reverse-mode differentiation core.

pub mod attention;
pub mod encoder;
pub mod loss;
pub mod model;
pub mod pairing;

pub mod tensor;
pub mod tokens;

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants group into usage errors (exit 1),
/// data errors (exit 2) and numeric failures (exit 3).
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Backward called on a non-scalar output.
    NotAScalar { shape: Vec<usize> },
    /// NaN or +Inf where a finite value was required.
    NonFinite { op: &'static str, detail: String },
    /// Vector with near-zero norm fed to a normalizing operation.
    DegenerateVector { op: &'static str, norm: f64 },
    /// Softmax row with every position masked out.
    EmptyAttention,
    /// Index outside the valid range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    /// Token id not in the vocabulary.
    Vocabulary { token: u32, vocab_size: usize },
    /// Token list without exactly one end-of-text marker.
    MissingEot { count: usize },
    /// A function expected to be deterministic returned different values.
    Determinism { detail: String },
    /// A caller-facing contract was violated (non-unit inputs, bad flags).
    Contract { detail: String },
    /// Fewer eligible negatives than requested; the caller re-draws.
    InsufficientNegatives { eligible: usize, requested: usize },
    /// Invalid or inconsistent configuration.
    Config { detail: String },
    /// Malformed input file.
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    /// Cross-record referential integrity violation.
    Integrity { detail: String },
    /// Malformed or incompatible checkpoint file.
    Checkpoint { detail: String },
    /// Gradient check exceeded its tolerance.
    GradCheck { max_rel_err: f64, worst: String },
    /// Non-finite loss or gradient during training.
    Numeric { detail: String },
    Io(std::io::Error),
}

impl Error {
    /// Process exit code class for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Contract { .. } => 1,
            Error::Parse { .. }
            | Error::Integrity { .. }
            | Error::Checkpoint { .. }
            | Error::Io(_)
            | Error::Vocabulary { .. }
            | Error::MissingEot { .. } => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::NotAScalar { shape } => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
            Error::NonFinite { op, detail } => write!(f, "{op}: non-finite value: {detail}"),
            Error::DegenerateVector { op, norm } => {
                write!(f, "{op}: degenerate vector with norm {norm:e}")
            }
            Error::EmptyAttention => f.write_str("attention row with all positions masked"),
            Error::IndexOutOfRange { what, index, limit } => {
                write!(f, "{what} index {index} out of range (limit {limit})")
            }
            Error::Vocabulary { token, vocab_size } => {
                write!(f, "token id {token} outside vocabulary of size {vocab_size}")
            }
            Error::MissingEot { count } => {
                write!(f, "token list must contain exactly one EOT, found {count}")
            }
            Error::Determinism { detail } => write!(f, "non-deterministic function: {detail}"),
            Error::Contract { detail } => write!(f, "contract violation: {detail}"),
            Error::InsufficientNegatives { eligible, requested } => write!(
                f,
                "only {eligible} eligible negatives for a request of {requested}"
            ),
            Error::Config { detail } => write!(f, "configuration error: {detail}"),
            Error::Parse { path, line, detail } => {
                write!(f, "{path}:{line}: parse error: {detail}")
            }
            Error::Integrity { detail } => write!(f, "integrity error: {detail}"),
            Error::Checkpoint { detail } => write!(f, "checkpoint error: {detail}"),
            Error::GradCheck { max_rel_err, worst } => {
                write!(f, "gradient check failed: max rel err {max_rel_err:e} at {worst}")
            }
            Error::Numeric { detail } => write!(f, "numeric failure: {detail}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
