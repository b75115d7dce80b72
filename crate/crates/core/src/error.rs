use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?} (expected \"RBMF\")")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("{path}: shape mismatch: {detail}")]
    ShapeMismatch { path: PathBuf, detail: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("duplicate trajectory id {0:?}")]
    DuplicateId(String),
    #[error("invalid trajectory {id:?}: {message}")]
    InvalidTrajectory { id: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no eligible sample: {0}")]
    Ineligible(String),
    #[error("tokenization: {0}")]
    Tokenize(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(
        "training diverged at step {step} (lr {lr:.3e}): non-finite loss (pref {l_pref}, prog {l_prog}, succ {l_succ})"
    )]
    Diverged {
        step: usize,
        lr: f64,
        l_pref: f64,
        l_prog: f64,
        l_succ: f64,
    },
    #[error("offline RL diverged at step {step}: non-finite loss (q {l_q}, v {l_v}, pi {l_pi})")]
    IqlDiverged { step: usize, l_q: f64, l_v: f64, l_pi: f64 },
    #[error("insufficient annotations: {have} of {need} required")]
    InsufficientAnnotations { have: usize, need: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
