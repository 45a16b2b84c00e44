pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod feature_io;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod shortcut;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{concat, Tape, TensorError, Var};
pub use tensor::{Scalar, Tensor};
