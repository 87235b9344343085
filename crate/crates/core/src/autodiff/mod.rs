//! Dense `f64` tensors, a reverse-mode tape, layers and Adam.

mod layers;
mod optim;
mod tape;
mod tensor;

pub use layers::{Layer, Network};
pub use optim::{AdamConfig, Bound, ParamSet};
pub use tape::{conv_out_dim, Conv2dSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
