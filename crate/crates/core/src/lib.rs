pub mod cli;
pub mod erm;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod pareto;
pub mod qp;
pub mod search;
pub mod wro;

pub use error::{Error, Result};
