pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod io;
pub mod losses;
pub mod network;
pub mod rng;
pub mod semantics;
pub mod synthesis;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use image::Image;
