use cogcas_autodiff::AdError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid benchmark: {0}")]
    Benchmark(String),
    #[error("grid {height}x{width} cannot hold {shapes} shapes (need at least {min}x{min} and 1..={max_shapes} shapes)")]
    GridTooSmall {
        height: usize,
        width: usize,
        shapes: usize,
        min: usize,
        max_shapes: usize,
    },
    #[error("class {0} has no positive images in this split")]
    NoPositives(u16),
    #[error("class {class}: need {needed} class-free images, only {available} available (short by {})", needed - available)]
    NearOodShortfall {
        class: u16,
        needed: usize,
        available: usize,
    },
    #[error("class {0} is already learned")]
    DuplicateClass(u16),
    #[error("class {0} is not learned")]
    UnknownClass(u16),
    #[error("no parameter block named {0:?}")]
    UnknownBlock(String),
    #[error("snapshot for task {0} already recorded")]
    SnapshotExists(usize),
    #[error("no snapshot recorded for task {0}")]
    MissingSnapshot(usize),
    #[error("binary target expected, got {0}")]
    InvalidTarget(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("loose fusion consults ground truth and cannot produce a deployable label map")]
    LooseNotDeployable,
    #[error("{size} Hessian coordinates exceed the limit of {limit}; select fewer blocks")]
    HessianTooLarge { size: usize, limit: usize },
    #[error("stored directions span {rank} of {dim} dimensions; no feasible update remains")]
    NoFeasibleDirection { rank: usize, dim: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("{0}")]
    Precondition(String),
}
