use thiserror::Error;

/// Error taxonomy shared by every module. The CLI maps these onto exit codes:
/// configuration/domain/resolution problems are usage errors, the rest are
/// numerical failures.
#[derive(Debug, Error)]
pub enum WmError {
    /// Invalid construction parameters (bounds, counts, cutoffs).
    #[error("configuration error: {0}")]
    Config(String),
    /// Input outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Grid cannot resolve the requested scale.
    #[error("resolution error: {0}")]
    Resolution(String),
    /// Quadrature tail estimate above tolerance or similar accuracy breakdown.
    #[error("accuracy error: {0}")]
    Accuracy(String),
    /// Iteration failed to converge or produced non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Root-find / optimizer failure with diagnostic payload.
    #[error("fit error: {0}")]
    Fit(String),
}

pub type Result<T> = std::result::Result<T, WmError>;
