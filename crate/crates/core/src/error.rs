use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("output node {0} is not a scalar")]
    NotScalar(usize),
    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),
    #[error("index {index} out of range for {len} classes")]
    ClassIndex { index: usize, len: usize },
    #[error("degenerate attribution: zero-norm map")]
    DegenerateAttribution,
    #[error("dense mode refused: dimension {dim} exceeds limit {limit}")]
    TooLarge { dim: usize, limit: usize },
    #[error("training diverged at the first epoch: learning rate unusable")]
    DivergedAtStart,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
