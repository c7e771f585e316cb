use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line direction has zero length")]
    ZeroDirection,

    #[error("direction and moment are not orthogonal (|v.m| = {0:e})")]
    NonLineInput(f64),

    #[error("segment endpoints coincide")]
    DegenerateSegment,

    #[error("too few lines: need at least {needed}, got {got}")]
    TooFewLines { needed: usize, got: usize },

    #[error("projected feature row {0} has (near) zero norm")]
    DegenerateRow(usize),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("Sinkhorn scaling underflowed (denominator {0:e})")]
    NumericalUnderflow(f64),

    #[error("requested top-{k} from a {rows}x{cols} matrix")]
    KTooLarge { k: usize, rows: usize, cols: usize },

    #[error("line directions are degenerate (all parallel)")]
    DegenerateDirections,

    #[error("translation system is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),

    #[error("RANSAC found no valid hypothesis")]
    NoValidHypothesis,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("method `{0}` requires a checkpoint")]
    MissingCheckpoint(String),

    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics or geometry rather than bad input files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroDirection
                | Error::DegenerateRow(_)
                | Error::NonFiniteGradient(_)
                | Error::NumericalUnderflow(_)
                | Error::DegenerateDirections
                | Error::RankDeficient(_)
                | Error::NoValidHypothesis
        )
    }
}
