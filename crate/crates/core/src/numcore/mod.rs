//! Dense `f64` matrices and a reverse-mode gradient tape.

mod tape;
mod tensor;

pub use tape::{GradTape, Gradients, Var};
pub use tensor::{is_checked, set_checked, sigmoid, softmax, Tensor};
