//! Hardware-aware post-training quantization: topology generation from a
//! datatype spec, calibration, bit-width search and integer lowering.

pub mod calibration;
pub mod dataset;
pub mod dtype;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod hwspec;
pub mod interp;
pub mod plan;
pub mod realize;
pub mod search;
pub mod simulate;
pub mod tensor;
pub mod topology;

pub use dtype::{max_bits, DType};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Op, OpKind};
pub use tensor::Tensor;
