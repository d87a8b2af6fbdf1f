//! Dense tensors, a reverse-mode tape, Adam, and gradient checking.

mod adam;
mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled};
pub use graph::{softmax_row, Graph, Var};
pub use tensor::{Param, ParamId, ParamStore, Tensor};
