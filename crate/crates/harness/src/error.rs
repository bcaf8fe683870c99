use std::path::PathBuf;

use postprune::allocation::AllocError;
use postprune::graph::GraphError;
use postprune::io::FormatError;
use postprune::metrics::MetricError;
use postprune::reconstruction::ReconError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 data or model format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Alloc(AllocError::RateOutOfRange(_)) => 1,
            HarnessError::Recon(ReconError::Config(_)) => 1,
            HarnessError::Numerical(_) => 3,
            HarnessError::Metric(MetricError::ZeroDenominator) => 3,
            _ => 2,
        }
    }
}
