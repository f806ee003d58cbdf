//! Core library for a unified-token multimodal policy on a deterministic
//! gridworld. Text, images and robot actions share one discrete vocabulary;
//! a single bidirectional transformer is trained with a masked-token
//! objective and queried per modality: actions decode in one forward pass,
//! text and images through iterative re-mask decoding.
//!
//! Module map:
//! - [`vocab`]: unified token space, byte text codec, action bin quantizer,
//!   palette image codec
//! - [`assembly`]: fixed-layout context construction and target blocks
//! - [`diffusion`]: mask schedules, forward corruption, masked cross entropy
//! - [`nn`]: scalar trait and the dense kernels (matmul, layernorm, gelu)
//! - [`model`]: transformer forward/backward and logit restriction
//! - [`decode`]: one-step and re-mask decoding
//! - [`gridworld`]: environment, scripted expert, dataset generation
//! - [`train`]: two-stage masked-token training loop with Adam
//! - [`checkpoint`]: binary checkpoint format
//! - [`eval`]: rollouts, success rates, PSNR/SSIM, planning accuracy

pub mod assembly;
pub mod checkpoint;
pub mod decode;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gridworld;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
