use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants split into two families: input/schema problems (bad files, bad
/// configs, unknown columns) and estimation problems (rank deficiency, weak
/// instruments, too few lags). [`Error::is_input_error`] tells them apart so
/// front ends can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` listed more than once")]
    DuplicateColumn(String),
    #[error("row {row}: outcome must be 0 or 1, found `{value}`")]
    NonBinaryOutcome { row: usize, value: String },
    #[error("cohort `{0}` has fewer than two rows and cannot be standardized")]
    SingletonCohort(String),
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("design matrix is rank deficient (rank {rank} of {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },
    #[error("insufficient data: need at least {needed} complete rows, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("cluster-robust covariance needs at least two clusters")]
    SingleCluster,
    #[error("weak instrument: first-stage coefficient {coefficient:.3e} (threshold {threshold:.1e})")]
    WeakInstrument { coefficient: f64, threshold: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("closed form unavailable: {0}")]
    UnsupportedDriftLaw(String),
    #[error("reliability ratio {0} outside (0, 1]")]
    LambdaOutOfRange(f64),
    #[error("variances must be strictly positive (lag {lag}, current {current})")]
    NonpositiveVariance { lag: f64, current: f64 },
    #[error("too few usable lagged tests: found {found}, need at least {needed}")]
    TooFewLags { found: usize, needed: usize },
    #[error("polynomial degree {degree} too high for {points} points (need degree + 2)")]
    DegreeTooHigh { degree: usize, points: usize },
    #[error("baseline coefficient is zero; share is undefined")]
    ZeroBaseline,
    #[error("panel carries no latent truth columns")]
    NoTruthColumns,
    #[error("replication {index} failed: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for schema, configuration and I/O failures; false for failures
    /// raised while estimating on otherwise valid input.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::MissingColumn(_)
            | Error::UnknownColumn(_)
            | Error::DuplicateColumn(_)
            | Error::NonBinaryOutcome { .. }
            | Error::SingletonCohort(_)
            | Error::EmptyDataset
            | Error::InvalidRow { .. }
            | Error::InvalidConfig(_)
            | Error::NoTruthColumns
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => true,
            Error::Replication { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
