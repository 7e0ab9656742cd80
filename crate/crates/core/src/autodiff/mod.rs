//! Dense tensors, a recording tape for reverse-mode gradients, finite-difference
//! checking and the Adam optimiser.

mod gradcheck;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::{argmax, cross_entropy, layer_norm, matmul, softmax};
pub(crate) use ops::{gelu, layer_norm_row, softmax_in_place};
pub use optim::{optimizer_step, warmup_lr, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, Scalar, Tensor, Trans};
