//! Small dense-tensor core with tape-based reverse-mode differentiation.
//!
//! Values are `f64` throughout. A [`Graph`] is a single-use tape: build the
//! forward computation from parameters and inputs, call
//! [`Graph::backward`] once on a scalar, and read gradients either from the
//! returned [`Gradients`] or from the parameter store's gradient slots.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{BatchNorm, BnMode, Conv2d, Dense, LstmCell, LstmState, RunningStats};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
