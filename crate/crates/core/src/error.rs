use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("cannot reduce over an empty axis")]
    EmptyAxis,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch-norm `{0}` has uninitialized statistics; run a training pass first")]
    UninitializedStatistics(String),

    #[error("function is not deterministic: two evaluations at the same point gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cloud has {n} points but at least {required} are required (k = {k})")]
    InsufficientPoints { n: usize, k: usize, required: usize },

    #[error("bad {what} header: {detail}")]
    Header { what: &'static str, detail: String },

    #[error("truncated {what}: header declares {expected} but payload holds {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("duplicate submap id {0}")]
    DuplicateId(u64),

    #[error("malformed index record on line {line}: {detail}")]
    IndexRecord { line: usize, detail: String },

    #[error("failed to read submap {id} ({path}): {source}")]
    Submap {
        id: u64,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("no mineable training tuples in the dataset")]
    NoTuples,

    #[error("descriptor database is empty")]
    EmptyDatabase,

    #[error("non-finite value encountered: {0}")]
    NumericFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
