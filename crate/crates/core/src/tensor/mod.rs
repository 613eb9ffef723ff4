//! Dense f64 arrays, the gradient tape, parameters, and gradient checks.

pub mod array;
pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod tape;

pub use array::Array;
pub use param::ParamStore;
pub use tape::{Gradients, Tape, Tensor};
