pub mod error;
pub mod exec;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub mod prob;
pub mod regularize;
pub mod model;
pub mod ensloss;
pub mod data;
pub mod train;
pub mod evalkit;
pub mod cli;
