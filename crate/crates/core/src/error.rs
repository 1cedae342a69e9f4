use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// Sampling condition T*v/L < 1 is violated for some cell.
    #[error("sampling condition violated on cell {cell}: T*v/L = {ratio:.4} >= 1")]
    Sampling { cell: usize, ratio: f64 },

    /// A simulation step produced a state outside the admissible set.
    #[error("internal consistency error at step {step}: {detail}")]
    Consistency { step: u64, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("identification failed for cell {cell}: {cause}")]
    Identification { cell: usize, cause: String },

    #[error("identification error: {0}")]
    Fit(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("infeasible decision problem: {0}")]
    Infeasible(String),

    #[error("best-response dynamics did not converge after {sweeps} sweeps")]
    NonConvergence {
        sweeps: usize,
        /// Aggregate cost after each sweep.
        sweep_costs: Vec<f64>,
    },

    #[error("game at interval {interval} failed: {source}")]
    Interval {
        interval: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("performance index undefined: baseline has no congestion")]
    UndefinedIndex,

    #[error("empty sweep grid")]
    EmptyGrid,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error (possibly wrapped in an interval context) is a
    /// best-response non-convergence.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            Error::NonConvergence { .. } => true,
            Error::Interval { source, .. } => source.is_non_convergence(),
            _ => false,
        }
    }
}
