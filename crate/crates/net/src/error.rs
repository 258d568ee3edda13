use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Core(#[from] trajdiff_core::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("{0}")]
    State(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("non-finite loss at iteration {iteration} (batch seed {batch_seed}, pairs {pairs:?}, timesteps {timesteps:?})")]
    NonFinite {
        iteration: usize,
        batch_seed: u64,
        pairs: Vec<String>,
        timesteps: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, NetError>;

impl NetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NetError::Io { path: path.into(), source }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        NetError::Checkpoint { path: path.into(), message: message.to_string() }
    }
}
