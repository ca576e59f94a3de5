use thiserror::Error;

/// Error type shared across the pipeline.
///
/// The variants map onto the failure classes surfaced by the CLI: everything
/// up to `Config` is a validation failure (exit code 1), the rest are runtime
/// failures (exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis disagreement between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A scalar parameter (stride, kernel, sigma, ...) out of range.
    #[error("parameter error: {0}")]
    Param(String),

    /// Bad keypoint / label annotations.
    #[error("annotation error: {0}")]
    Annotation(String),

    /// Invalid model, dataset, or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (files, manifests, prediction lists).
    #[error("input error: {0}")]
    Input(String),

    /// Training diverged or could not proceed.
    #[error("training error: {0}")]
    Training(String),

    /// Metric or report computation failed.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// NaN or Inf produced by a forward or backward pass.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A bug: internal bookkeeping out of sync.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that indicate bad user input rather than a runtime
    /// failure. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dim(_)
                | Error::Param(_)
                | Error::Annotation(_)
                | Error::Config(_)
                | Error::Input(_)
        )
    }

    /// Short machine-readable tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dim(_) => "dimension",
            Error::Param(_) => "parameter",
            Error::Annotation(_) => "annotation",
            Error::Config(_) => "configuration",
            Error::Input(_) => "input",
            Error::Training(_) => "training",
            Error::Eval(_) => "evaluation",
            Error::NonFinite(_) => "non_finite",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
