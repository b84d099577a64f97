//! EPC-Net: place recognition on point clouds with proxy-point graphs and a
//! grouped VLAD descriptor head.

pub mod data;
pub mod error;
pub mod graph;
pub mod heads;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
