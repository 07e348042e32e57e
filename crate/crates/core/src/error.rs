use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("source region is empty; no known pixels to sample from")]
    EmptySource,

    #[error("input {height}x{width} is too small for {pools} pooling stages")]
    InputTooSmall {
        height: usize,
        width: usize,
        pools: usize,
    },

    #[error("weight file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("weight file truncated while reading {0}")]
    Truncated(String),

    #[error("weight file: {0}")]
    Format(String),

    #[error("no admissible reference position: {0}")]
    NoAdmissiblePosition(String),

    #[error("objective is not finite at the starting point")]
    NonFinite,

    #[error("{stage} stage failed at patch {patch} placed at {placement}: {source}")]
    Pipeline {
        stage: Stage,
        patch: usize,
        placement: Placement,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage, used for diagnostics and the run report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Setup,
    Coarse,
    Fine,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Setup => "setup",
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        })
    }
}

/// Top-left corner of a patch in image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Placement {
    pub y: usize,
    pub x: usize,
}

impl Placement {
    pub fn new(x: usize, y: usize) -> Self {
        Placement { y, x }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}
