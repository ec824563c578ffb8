use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("layer {layer}, stage `{stage}`: {source}")]
    Forward {
        layer: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("backward called on a tape that was already consumed")]
    TapeConsumed,

    #[error("backward requires a tape recorded with gradients enabled")]
    NoGrad,

    #[error("expected a scalar (1x1) tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("collective failure: {0}")]
    Collective(String),

    #[error("replica divergence detected: {0}")]
    ReplicaDivergence(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at(self, layer: usize, stage: &'static str) -> Self {
        Error::Forward {
            layer,
            stage,
            source: Box::new(self),
        }
    }
}
