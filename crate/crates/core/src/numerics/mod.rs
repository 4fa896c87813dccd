//! Minimal reverse-mode array engine: exactly the primitives the ViT needs.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    compare_gradients, finite_diff_gradient, relative_error, GradCheckReport, DEFAULT_STEP,
    RELATIVE_FLOOR,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default `eps` for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} has a zero extent")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("column slice {start}..{} exceeds {cols} columns", start + width)]
    Slice {
        start: usize,
        width: usize,
        cols: usize,
    },
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("concatenation of zero tensors")]
    EmptyConcat,
    #[error("label {label} at batch index {index} is outside 0..{classes}")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("{got} labels for a batch of {expected}")]
    LabelCount { expected: usize, got: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

#[cfg(test)]
mod tests;
