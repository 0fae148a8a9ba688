use std::path::PathBuf;

/// Errors produced by the spctrl core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid skeleton spec: {0}")]
    InvalidSkeleton(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prompt overflow: {0}")]
    PromptOverflow(String),

    #[error("missing token position for keypoint {0}")]
    MissingToken(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: l_ldm={l_ldm}, l_ht={l_ht}")]
    NonFiniteLoss { step: usize, l_ldm: f64, l_ht: f64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &std::path::Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
