use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] vg_tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("target ventricle ratio {target} unreachable; maximum achievable is {achieved_max:.4}")]
    Unreachable { target: f64, achieved_max: f64 },
    #[error("label grid has no brain pixels")]
    EmptyBrain,
    #[error("cannot normalize: all {0} ratios are identical")]
    ZeroRange(usize),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("duplicate stream label `{0}`")]
    DuplicateLabel(String),
    #[error("training diverged at {stage} step {step}: loss {loss}")]
    Diverged { stage: String, step: usize, loss: f64 },
    #[error("insufficient pool: {0}")]
    InsufficientPool(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{path} not found; run `{step}` first")]
    MissingPrerequisite { path: PathBuf, step: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
