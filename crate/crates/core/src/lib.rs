//! Whole-surface-image classification from patch-level vision-transformer
//! predictions fused with Grad-CAM++ saliency.
//!
//! The pipeline tiles a large image into non-overlapping patches, drops
//! background-dominated ones, classifies each remaining patch with a small
//! ViT, computes a Grad-CAM++ saliency map for the whole image with a small
//! CNN, and combines the patch votes weighted by their mean saliency.

pub mod autograd;
mod error;
pub mod kernels;
pub mod parallel;
mod tensor;
pub mod imaging;
pub mod weights;
pub mod patch;
pub mod vit;
pub mod cnn;
pub mod saliency;
pub mod fusion;
pub mod synth;
pub mod eval;
pub mod config;
pub mod overlay;

pub use error::{Error, Result};
pub use tensor::Tensor;
