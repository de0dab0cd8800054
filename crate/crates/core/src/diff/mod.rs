//! Numerical substrate: dense tensors, a reverse-mode tape, named parameter
//! sets and first-order optimizers.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, sgd_step, sgd_step_prefix, AdamConfig, AdamState};
pub use params::{ParamSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use params::ByteReader;
pub use tape::{sigmoid, Gradients, GruVars, Tape, Var};
pub use tensor::Tensor;
