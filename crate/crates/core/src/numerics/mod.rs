//! Dense tensors, a reverse-mode tape, Adam, and gradient verification.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{BiasMatrix, Gradients, Graph, Mask, Var};
pub use layers::{leaky_relu, linear_forward, softmax_rows, DEFAULT_LEAKY_SLOPE};
pub use params::{xavier_uniform, ParamStore};
pub use tensor::{Matrix, Tensor};

pub(crate) use params::read_u32;
