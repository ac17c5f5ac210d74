//! Dense linear algebra, activations and reverse-mode gradients.

pub mod parallel;
mod params;
mod rng;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use rng::{derive_seed, seeded_rng, RngHandle};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    gelu, gelu_scalar, matmul, matmul_nt, matmul_tn, prelu, prelu_scalar, sigmoid, sigmoid_scalar, softmax_rows, Tensor,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("usage error: {0}")]
    Usage(String),
}

/// Arithmetic width used for inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Applies the storage width to a tensor (identity for `F64`).
    pub fn apply(self, t: &Tensor) -> Tensor {
        match self {
            Precision::F32 => t.round_to_f32(),
            Precision::F64 => t.clone(),
        }
    }
}
