//! Array math, reverse-mode differentiation and seeded randomness.

mod array;
mod rng;
mod tape;

pub(crate) use array::log_sum_exp;
pub use array::{argmax, gelu, gelu_scalar, layer_norm, matmul, softmax, Array, LAYER_NORM_EPS};
pub use rng::{Rng, RngState};
pub use tape::{Grads, Tape, Var};
