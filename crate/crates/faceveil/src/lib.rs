//! Attribute-conditional generation of erasable adversarial face images.
//!
//! The pipeline trains, in three stages, (1) an attribute-editing
//! encoder/decoder GAN, (2) a perturbation encoder optimized with a
//! meta-auxiliary attack against an ensemble of face-embedding surrogates,
//! tightly coupled with (3) a restorer that erases the perturbation. A noise
//! pool of differentiable corruptions hardens both directions against common
//! image processing, and an evaluation harness measures attack success,
//! erasion success, image quality and robustness, with FGSM/PGD baselines.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gan;
pub mod meta;
pub mod noise;
pub mod nn;
pub mod perturbation;
pub mod restorer;
pub mod surrogate;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Dual, ImageTensor, Scalar, Tensor};
