//! Diffusion-based segmentation of lumbar spine MRI slices.
//!
//! The crate covers the full experiment surface: noise schedules and DDIM
//! sampling ([`diffusion`]), the denoising networks ([`networks`]) built on a
//! small reverse-mode differentiator ([`autodiff`]), training objectives
//! ([`losses`]), step-uncertainty ensemble inference ([`ensemble`]),
//! pre-segmentation refinement ([`preseg`]), MRI preprocessing ([`data`]),
//! training loops ([`training`]) and evaluation statistics ([`eval`]).

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod preseg;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
