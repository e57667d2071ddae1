//! Sound-conditioned image generation with a spectrally normalized
//! projection discriminator and a shared auxiliary classifier.

pub mod audio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use models::{ClassId, ClassTable};
pub use tensor::Tensor;
