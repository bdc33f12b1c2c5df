pub mod boxes;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod sample;
pub mod train;

pub use error::{Error, Result};
