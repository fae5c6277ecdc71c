//! Control-conditioned video diffusion editing at desk scale.
//!
//! The crate covers the numerical side of the editor: noise schedules and
//! deterministic DDIM sampling/inversion, a small frame-wise denoiser with
//! key-frame attention, zero-gated temporal attention, a control branch and
//! LoRA adapters, one-shot fine-tuning with a hand-written reverse-mode tape,
//! overlapping-window fusion for long videos, and SSIM / cosine metrics.
//!
//! Everything here is `no_std` + `alloc`. File formats, synthetic data and the
//! command line live in the `controlvideo-cli` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod diffusion;
pub mod edit;
mod error;
pub mod longvideo;
mod math;
pub mod metrics;
pub mod model;
pub mod rng;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{LatentVideo, Tensor};
