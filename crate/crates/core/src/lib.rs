pub mod dataset;
pub mod error;
pub mod graph;
pub mod influence;
pub mod model;
pub mod pipeline;
pub mod routing;
pub mod stats;

pub use error::{Error, Result};
