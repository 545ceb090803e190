use thiserror::Error;

/// Errors raised by the CFA library.
#[derive(Debug, Error)]
pub enum CfaError {
    /// Bad shapes, out-of-range labels or parameters outside their domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A dataset, mask or split violates the coverage requirements
    /// (every class and every domain must be present in training data).
    #[error("curation error: {0}")]
    Curation(String),

    /// A class-head row lies inside the domain head's row space, so it
    /// vanishes under projection.
    #[error("degenerate head row {row}: no component outside the domain head row space")]
    DegenerateRow { row: usize },

    /// An iterative procedure stopped without meeting its convergence test.
    #[error("{what} did not converge (last objective values: {})", tail(.trace))]
    NonConvergence { what: String, trace: Vec<f64> },

    /// A metric is undefined on the given input (e.g. empty predictions).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed binary or JSON container.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn tail(trace: &[f64]) -> String {
    let start = trace.len().saturating_sub(5);
    let parts: Vec<String> = trace[start..].iter().map(|v| format!("{v:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

pub type Result<T> = std::result::Result<T, CfaError>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CfaError::Argument(msg.into()))
}
