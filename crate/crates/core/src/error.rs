use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cohort is empty after validation")]
    EmptyCohort,

    #[error("no exposure in {0}: nothing to estimate")]
    NoExposure(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("treatment window [{lo}, {hi}] contains no users; widen the window")]
    EmptyTreatment { lo: f64, hi: f64 },

    #[error(
        "only {usable} usable control groups ({dropped} dropped); at least {required} are needed"
    )]
    TooFewControls {
        usable: usize,
        dropped: usize,
        required: usize,
    },

    #[error(
        "effect target {target} is infeasible: baseline survival at the horizon is {baseline}"
    )]
    InfeasibleTarget { target: f64, baseline: f64 },

    #[error("no fitted hazard for bucket(s): {}", .0.join(", "))]
    MissingBuckets(Vec<String>),

    #[error("time grids do not match")]
    GridMismatch,

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("{}:{line}:{column}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("duplicate user id {0:?}")]
    DuplicateUser(String),

    #[error("reputation log for user {0:?} is not sorted by time")]
    UnsortedLog(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by the input data rather than by how the
    /// library was called.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidConfig(_) | Error::InvalidArgument(_))
    }
}
