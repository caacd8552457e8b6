pub mod corpus;
pub mod error;
pub mod eval;
pub mod knowledge;
pub mod model;
pub mod numerics;
pub mod text;
pub mod train;

pub use error::{GemError, Result};
