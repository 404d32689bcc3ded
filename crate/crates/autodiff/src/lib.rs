//! Minimal reverse-mode automatic differentiation over dense 2-D `f64`
//! tensors, with Adam and a finite-difference gradient checker.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, finite_difference_check, GradCheckOptions, GradCheckReport};
pub use graph::{dropout_mask, sigmoid, Gradients, Graph, Mode, ParamGrads, UnaryKind, Var, LOG_EPS};
pub use params::{ParamId, ParamStore, Parameterized};
pub use rng::RngStream;
pub use tensor::Tensor;
