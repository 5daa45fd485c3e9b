pub mod archive;
pub mod detcodec;
pub mod error;
pub mod evalmetrics;
pub mod handmodel;
pub mod ikengine;
pub mod mocapgen;
pub mod rotmath;
pub mod shapefit;

pub use error::{Error, Result};
