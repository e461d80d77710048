pub mod autodiff;
pub mod completion;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod scenes;
pub mod sparse;

pub use error::{Error, Result};
