use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{message} at line {line}")]
    Parse { line: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("unknown query-document pair ({query_id}, {doc_id})")]
    UnknownPair { query_id: String, doc_id: u32 },

    #[error("missing propensity for query #{query}, document #{doc}, rank {rank}")]
    MissingPropensity {
        query: usize,
        doc: usize,
        rank: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid model dump: {0}")]
    ModelFormat(String),

    #[error("no completed runs in {0}")]
    NoCompletedRuns(PathBuf),

    #[error("cell alpha={alpha} tau={tau} seed={seed}: {source}")]
    Cell {
        alpha: f64,
        tau: f64,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind used by the command line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DegenerateLabels(_) => "degenerate_labels",
            Error::UnknownPair { .. } => "unknown_pair",
            Error::MissingPropensity { .. } => "missing_propensity",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::ModelFormat(_) => "model_format",
            Error::NoCompletedRuns(_) => "no_completed_runs",
            Error::Cell { source, .. } => source.kind(),
        }
    }
}
