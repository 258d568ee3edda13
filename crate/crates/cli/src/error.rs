use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("entry {id} (seed {seed}): {source}")]
    Entry {
        id: usize,
        seed: u64,
        #[source]
        source: Box<CliError>,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] trajdiff_core::Error),
    #[error(transparent)]
    Net(#[from] trajdiff_net::NetError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn input(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Input { path: path.into(), message: message.to_string() }
    }

    pub fn entry(id: usize, seed: u64, source: impl Into<CliError>) -> Self {
        CliError::Entry { id, seed, source: Box::new(source.into()) }
    }
}
