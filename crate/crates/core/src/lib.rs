pub mod error;
pub mod tensor;

pub use error::{Error, ErrorCategory, FormatError, Result};
pub use tensor::{Gradients, RotateVariant, Tape, Tensor, Var};
pub mod graph;
pub mod rope;
pub mod attention;
pub mod model;
pub mod data;
pub mod train;
pub mod metrics;
pub mod pipeline;
