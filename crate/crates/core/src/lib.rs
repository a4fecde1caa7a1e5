//! Unpaired image translation through per-pixel predicted transformation
//! parameters: a small convolutional head predicts, for every pixel, the
//! parameters of an affine-in-HSV color change, a spatially-varying
//! Gaussian blur and a scaled fixed noise term; a multi-scale patch
//! discriminator trains the head adversarially.

pub mod bench;
pub mod color;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod infer;
pub mod kernel;
pub mod metrics;
pub mod networks;
pub mod noise;
pub mod params;
pub mod real;
pub mod resize;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod translate;

pub use error::{Error, Result};
pub use real::Real;
