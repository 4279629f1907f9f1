//! Self-referential weight matrix sequence learners meta-trained for
//! in-context continual learning.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod optim;
pub mod srwm;
pub mod tasks;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
