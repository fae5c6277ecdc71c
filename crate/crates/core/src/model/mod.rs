//! The toy control-conditioned video denoiser.
//!
//! A frame-wise encoder/decoder (two down stages, a middle stage, two up
//! stages) over channels-last latents. Each stage is a residual block
//! followed by a transformer block whose spatial self-attention has been
//! turned into key-frame attention. Main-branch stages other than the middle
//! carry a temporal-attention branch in parallel with the key-frame attention,
//! gated by a zero-initialized projection. One control branch per control
//! slot copies the encoder and middle stages; its zero-gated outputs are
//! added to the decoder skips and the middle output.

use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

mod attention;
mod control;
mod lora;
mod net;
mod prompt;

pub use attention::{key_frame_attention, self_attention, temporal_attention, zero_gate, AttentionWeights, FeatureMap};
pub use control::{apply_mask_to_controls, control_fusion, Control, ControlStack};
pub use lora::{attach_lora, LoraAdapter, LoraTargets};
pub use net::{predict_noise, predict_noise_with, ForwardOptions, ModelParams};
pub use prompt::{PromptEmbedding, DEFAULT_MAX_TOKENS};

pub(crate) use net::{forward_graph, Binder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Main,
    Control,
}

/// What a parameter is for. Trainable-set selection is expressed in roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Frozen weights inherited from the image model.
    Base,
    /// `W_O` of a key-frame attention site.
    KeyFrameOutput(Branch),
    /// `W_Q`, `W_K`, `W_V`, `W_O` of a temporal-attention branch.
    TemporalProjection,
    /// Zero-initialized projection after a temporal-attention branch.
    TemporalGate,
    /// Zero-initialized projection on a control-branch output.
    ControlGate,
    LoraFactor,
}

/// A named weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

impl Param {
    pub(crate) fn new(name: String, role: ParamRole, tensor: Tensor) -> Self {
        Param { name, role, tensor }
    }
}

/// Geometry of the toy denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub control_channels: usize,
    /// Feature width `d` of every attention site.
    pub width: usize,
    pub text_dim: usize,
    pub ff_mult: usize,
    /// Number of control branches (one per control type).
    pub control_branches: usize,
    /// Standard deviation multiplier for the output convolution.
    pub out_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 4,
            control_channels: 1,
            width: 32,
            text_dim: 16,
            ff_mult: 2,
            control_branches: 1,
            out_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.latent_channels == 0 {
            bad.push("latent_channels");
        }
        if self.control_channels == 0 {
            bad.push("control_channels");
        }
        if self.width < 2 || !self.width.is_multiple_of(2) {
            bad.push("width (must be even and >= 2)");
        }
        if self.text_dim == 0 {
            bad.push("text_dim");
        }
        if self.ff_mult == 0 {
            bad.push("ff_mult");
        }
        if !(self.out_gain.is_finite() && self.out_gain > 0.0) {
            bad.push("out_gain");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid("model config", bad.join(", ")))
        }
    }
}
