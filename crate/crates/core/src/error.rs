use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FluidError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid rate {0}: must lie in (0, 1]")]
    Rate(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("capacity error: {clients} clients requested but only {examples} examples")]
    Capacity { clients: usize, examples: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("infeasible rate: |g[{index}]| / r = {ratio} exceeds 1")]
    InfeasibleRate { index: usize, ratio: f64 },

    #[error("non-positive slack denominator {0}")]
    Slack(f64),

    #[error("degenerate gradient: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FluidError {
    /// True for errors caused by user-supplied configuration rather than a
    /// failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            FluidError::Config(_) | FluidError::Parse { .. } | FluidError::Rate(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FluidError::Io {
            path: path.into(),
            source,
        }
    }
}
