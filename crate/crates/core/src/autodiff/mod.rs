//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_records, to_bytes, write_records, CheckpointError, FORMAT_VERSION, MAGIC};
pub use params::{Bound, ParamError, Parameter, ParameterSet};
pub use tape::{log_sum_exp, sigmoid, softmax_row, Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
