//! Minimal dense tensor engine with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use ops::{elementwise, sum_scalars, ElementwiseOp};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
