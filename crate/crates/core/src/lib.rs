pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod raster;
pub mod sampler;
pub mod tensor_ops;
pub mod training;
pub mod toy;

pub use error::{Error, Result};
