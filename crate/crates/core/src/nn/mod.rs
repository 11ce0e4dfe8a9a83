//! Numerical substrate: tensors, reverse-mode differentiation, optimizers and
//! seeded randomness.

pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use ops::{activation, cross_entropy, dropout, mse, softmax_rows, Activation, CE_FLOOR};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use param::{glorot_uniform, ParamId, ParamStore, Parameter};
pub use rng::SeedRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
