//! Dense tensors, reverse-mode autodiff and the neural primitives the
//! rest of the crate is built from.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use graph::{Axis, Gradients, Graph, Mode, RunningUpdate, Var};
pub use params::{Param, ParameterStore};
pub use rng::Rng;
pub use tensor::{Element, Tensor, HFAT_MAGIC, HFAT_VERSION};

pub(crate) use tensor::c;
