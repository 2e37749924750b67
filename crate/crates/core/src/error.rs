use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("grid size {0} is too small; a jigsaw puzzle needs M >= 2")]
    GridTooSmall(usize),
    #[error("grid size {grid} exceeds feature map extent {height}x{width}")]
    GridTooLarge {
        grid: usize,
        height: usize,
        width: usize,
    },
    #[error("node {0} has zero degree")]
    ZeroDegree(usize),
    #[error("row {0} has an empty neighbor support")]
    EmptySupport(usize),
    #[error("permutation of length {found} does not match a grid of {expected} cells")]
    PermutationSize { expected: usize, found: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} is out of range 1..={stages}")]
    StageOutOfRange { stage: usize, stages: usize },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("identification protocol: {0}")]
    Protocol(String),
}
