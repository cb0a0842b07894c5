use thiserror::Error;

pub type Result<T> = std::result::Result<T, AdError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("tensor shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward from a non-scalar output of shape {0:?} needs an explicit seed")]
    NonScalarOutput(Vec<usize>),
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("non-finite loss {value} while probing coordinate {index}")]
    NonFiniteProbe { index: usize, value: f64 },
    #[error("length mismatch: parameters {params}, gradient {grad}, mask {mask}")]
    LengthMismatch {
        params: usize,
        grad: usize,
        mask: usize,
    },
}
