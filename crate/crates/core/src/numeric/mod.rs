//! Dense arithmetic, capsule nonlinearities and reverse-mode gradients.

pub mod gradcheck;
pub mod ops;
pub mod tape;
mod tensor;

pub use gradcheck::{gradient_check, DifferentiableProgram, GradCheckReport};
pub use ops::{cosine_similarity, elu, leaky_relu, softmax, squash, LEAKY_RELU_SLOPE};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
