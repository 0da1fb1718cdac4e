//! Adversarial patches that fool Grad-CAM, on a small CNN trained from
//! scratch on synthetic shapes.
//!
//! * [`diff`]: tensors with reverse-mode autodiff, including differentiable
//!   gradient graphs (double backprop).
//! * [`model`]: the CNN, synthetic dataset, SGD trainer and model files.
//! * [`interpret`]: Grad-CAM and occlusion heatmaps.
//! * [`attack`]: patch composition, PGD-sign updates and the attack
//!   optimizers.
//! * [`metrics`]: energy ratio, histogram intersection, localization and the
//!   evaluation sweep.

pub mod attack;
pub mod diff;
pub mod error;
pub mod imageio;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
