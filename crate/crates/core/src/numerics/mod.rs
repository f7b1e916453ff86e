//! Dense tensors, a reverse-mode tape, AdamW and the binary checkpoint format.
//!
//! Everything numerical in the crate sits on these pieces. Values are plain
//! row-major buffers; differentiable computation is recorded on a [`Graph`]
//! and differentiated with [`Graph::backward`]. The scalar type is generic so
//! the same model code runs in 32-bit (training) and 64-bit (gradient checks).

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_update, AdamW, AdamWConfig};
pub use params::{Binding, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Epsilon used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floor applied to vector norms before dividing in `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Convert an `f64` literal, rounding if necessary.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numeric precision of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Two shapes that an operation cannot combine.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub lhs: Vec<usize>,
    pub rhs: Vec<usize>,
}

impl ShapeError {
    pub fn new(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
