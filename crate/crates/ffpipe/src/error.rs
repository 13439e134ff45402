use std::path::{Path, PathBuf};

pub type Result<T, E = PipeError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum PipeError {
    #[error(transparent)]
    Core(#[from] ffpipe_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("node {node}: timed out after {secs:.1} s waiting for {what}")]
    Timeout { node: usize, secs: f64, what: String },
    #[error("node {node}: run aborted by node {from}: {reason}")]
    Aborted { node: usize, from: usize, reason: String },
    #[error("node {node}: transport: {msg}")]
    Transport { node: usize, msg: String },
    #[error("node {node}: protocol: {msg}")]
    Protocol { node: usize, msg: String },
}

impl PipeError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipeError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
