use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "empty visual hull: no voxel was hit by at least {agreement} views \
         (intensity threshold tau = {tau})"
    )]
    EmptyHull { tau: f64, agreement: usize },

    #[error("density control removed every Gaussian at iteration {iteration}")]
    DegenerateCollapse { iteration: usize },

    #[error("non-finite loss at iteration {iteration} (snapshot: {snapshot:?})")]
    NonFiniteLoss {
        iteration: usize,
        snapshot: Option<PathBuf>,
    },

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
