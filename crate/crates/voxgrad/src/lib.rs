//! Minimal reverse-mode automatic differentiation for volumetric networks.
//!
//! Tensors are dense row-major `f64`. Volumes are laid out `[C, D, H, W]`
//! (batch size one). Everything runs on the CPU, single-threaded, so results
//! are bit-reproducible for a fixed seed.

pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use graph::{grad_enabled, no_grad, Gradients, Var};
pub use ops::axis_map::{resize_trilinear_tensor, AxisMap};
pub use ops::conv::conv_output_size;
pub use ops::elementwise::sigmoid;
pub use ops::reduce::softmax_tensor;
pub use ops::shape::reflect_pad_tensor;
pub use optim::{Adam, AdamConfig, AdamState};
pub use param::{NamedTensors, Param, ParamStore, Path, StoredTensor};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("checkpoint has parameter `{0}` that the model does not")]
    UnknownParam(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("stored tensor of shape {0:?} has {1} values")]
    CorruptTensor(Vec<usize>, usize),
}
