use thiserror::Error;

/// Errors raised anywhere in the clustering pipeline.
#[derive(Debug, Error)]
pub enum KdcError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("ragged csv: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least {required} distinct points, found {found}")]
    NotEnoughDistinctPoints { required: usize, found: usize },
    #[error("need at least {required} points, found {found}")]
    NotEnoughPoints { required: usize, found: usize },
    #[error("only {found} components above threshold {tau}, need {required}")]
    TooFewComponents {
        found: usize,
        required: usize,
        tau: f64,
    },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<KdcError>,
    },
}

impl KdcError {
    /// Wraps an error with the pipeline stage it came from.
    pub fn at(self, stage: impl Into<String>) -> Self {
        KdcError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Strips stage wrappers and returns the underlying error.
    pub fn root(&self) -> &KdcError {
        match self {
            KdcError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = KdcError> = std::result::Result<T, E>;
