//! Zero-shot low-light image enhancement.
//!
//! Each input image is enhanced on its own: three small convolutional
//! networks are optimized against the image to split it into reflectance,
//! illumination and noise, then the image is recomposed from a gamma-brightened
//! illumination and a denoised reflectance. No training data and no persisted
//! weights are involved; everything happens per image, driven by the losses in
//! [`loss`] and the Adam loop in [`pipeline`].

pub mod error;
pub mod imageio;
pub mod kernels;
pub mod loss;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
