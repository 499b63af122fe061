use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("infeasible CTC target: {labels} labels with {repeats} adjacent repeats need more than {frames} frames")]
    Infeasible {
        frames: usize,
        labels: usize,
        repeats: usize,
    },
    #[error("stitching gap: output frames {start}..{end} are not covered by any piece")]
    Stitch { start: usize, end: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad input or configuration rather than by a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Shape(_)
                | Error::Usage(_)
                | Error::Validation(_)
                | Error::Format(_)
                | Error::MissingArtifact(_)
        )
    }
}
