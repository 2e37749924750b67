#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod backbone;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod jigsaw;
pub mod params;
pub mod shuffled_graph;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
