//! Dense arithmetic and reverse-mode differentiation for the model graph.

mod param;
mod tape;
mod tensor;


pub use param::{GradBuffer, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Gradients, SoftmaxAxis, Tape, Var};
pub use tensor::DenseTensor;
