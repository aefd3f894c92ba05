use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a parameter) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// `backward` was asked to start from a non-scalar node.
    NonScalarRoot { shape: Vec<usize> },
    /// A path was looked up in a parameter tree that does not contain it.
    MissingParam(String),
    /// The hidden-state bank does not match the flattened parameter count.
    CoordinateCount { expected: usize, found: usize },
    NonFinite { what: &'static str },
    UnknownEnv(String),
    EpisodeDone,
    InvalidConfig(String),
    EmptyDataset,
    Checkpoint(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Self::NonScalarRoot { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            Self::MissingParam(path) => write!(f, "missing parameter `{path}`"),
            Self::CoordinateCount { expected, found } => write!(
                f,
                "hidden-state bank has {found} rows but the parameters flatten to {expected} coordinates"
            ),
            Self::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Self::UnknownEnv(name) => write!(f, "unknown environment `{name}`"),
            Self::EpisodeDone => write!(f, "step called on a finished episode"),
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Self::EmptyDataset => write!(f, "gradient dataset is empty"),
            Self::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Self::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
