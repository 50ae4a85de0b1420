//! Dense linear algebra, reverse-mode differentiation and the finite-difference oracle.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, numeric_gradient};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{binary_cross_entropy, cross_entropy, layer_norm, matmul, sigmoid, sigmoid_scalar, softmax_rows, Tensor};
