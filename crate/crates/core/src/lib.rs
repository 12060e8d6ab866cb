pub mod bench;
pub mod blendshape;
pub mod dataset;
pub mod error;
pub mod fitting;
pub mod geometry;
mod linalg;
pub mod pipeline;
pub mod predictor;
pub mod sh;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
