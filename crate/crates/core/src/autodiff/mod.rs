//! Dense f64 tensors with a recorded tape and reverse-mode gradients.

pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, RunningStats, Var};
pub use kernels::Padding;
pub use params::{BnParams, ParamGroup, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
