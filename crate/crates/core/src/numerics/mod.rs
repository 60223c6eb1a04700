//! Dense tensors, small conv/dense networks with analytic gradients, Adam,
//! the finite-difference oracle and the checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod network;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC};
pub use gradcheck::{finite_difference_gradient, finite_difference_with, relative_error};
pub use layers::{conv_out_dim, LayerSpec};
pub use network::{FunctionApproximator, Network, ParamStore};
pub use tensor::Tensor;
