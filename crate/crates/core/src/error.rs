use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("world template too dense: placed {placed} of {wanted} obstacles after {attempts} attempts")]
    OverDense {
        placed: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("free space too small: sampled {found} of {wanted} free points in {attempts} attempts")]
    SamplingBudget {
        found: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("graph is empty")]
    EmptyGraph,

    #[error("vertex {0} out of range")]
    BadVertex(usize),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("optimizer step before backward: parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("success rate {rate:.4} below floor {floor:.4} over {episodes} probe episodes")]
    ImpossibleTemplate {
        rate: f64,
        floor: f64,
        episodes: usize,
    },

    #[error("recovery budget exhausted after {episodes} episodes with {collected} of {wanted} recoveries")]
    RecoveryBudget {
        episodes: usize,
        collected: usize,
        wanted: usize,
    },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible trunk shapes: {}", .0.join("; "))]
    TrunkMismatch(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
