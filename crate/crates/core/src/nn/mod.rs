//! Minimal differentiable tensor core: tensors, convolution, a reverse-mode
//! tape, parameter storage, AdamW and checkpoint encoding.

pub mod adamw;
pub mod checkpoint;
pub mod conv;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adamw::AdamW;
pub use graph::{Graph, Var};
pub use params::{BoundParams, Param, ParamStore};
pub use tensor::{ImageTensor, Real, Tensor};
