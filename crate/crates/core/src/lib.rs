pub mod density;
pub mod energy;
pub mod error;
pub mod flow;
pub mod grid;
pub mod homogenize;
pub mod kernel;
pub mod minimize;
pub mod pointcloud;

pub use error::{Error, Result};
