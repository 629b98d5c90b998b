//! Dense double-precision tensors, a reverse-mode autodiff tape and the
//! Adam optimizer.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{
    check_gradients, finite_diff_check, relative_error, FdOptions, FdReport, ParamError,
};
pub use graph::{Gradients, Graph, NodeId, PointField, MASK_NEG};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::Params;
pub use tensor::Tensor;
