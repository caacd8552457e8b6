//! Dense f64 tensors, a reverse-mode gradient tape and a finite-difference checker.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamGradError};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{stable_softmax, Tensor};
