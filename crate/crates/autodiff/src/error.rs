use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index error in {op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
}

pub(crate) fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> AutodiffError {
    AutodiffError::Shape { op, left, right }
}
