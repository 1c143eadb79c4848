pub mod augment;
pub mod ccd;
pub mod data;
pub mod detect;
pub mod error;
pub mod image;
pub mod io;
pub mod localize;
pub mod metrics;
pub mod losses;
pub mod model;
pub mod msssim;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use tensor::Tensor;
