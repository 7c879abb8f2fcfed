pub mod anomaly;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod gpam;
pub mod hcfm;
pub mod hypergraph;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tgem;

pub use error::{Error, Result};
