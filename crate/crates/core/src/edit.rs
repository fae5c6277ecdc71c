//! Short-video editing: invert or noise the source, then sample with the
//! target prompt under classifier-free guidance.

use crate::diffusion::{cfg_combine, ddim_sample, make_initial_value, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::model::{predict_noise, ControlStack, ModelParams, PromptEmbedding};
use crate::rng::seeded;
use crate::{LatentVideo, Result};

/// The denoiser with its conditioning fixed, as a [`NoisePredictor`].
/// A guidance scale of 1 evaluates only the conditional branch; the
/// unconditional branch uses the null prompt.
pub struct GuidedDenoiser<'a> {
    pub params: &'a ModelParams,
    pub stack: &'a ControlStack,
    pub prompt: &'a PromptEmbedding,
    pub guidance: f64,
    /// 0-based key frame.
    pub key_frame: usize,
}

impl GuidedDenoiser<'_> {
    pub fn guided(&self, xt: &LatentVideo, stack: &ControlStack, t: usize, key_frame: usize) -> Result<LatentVideo> {
        let cond = predict_noise(xt, stack, self.prompt, t, self.params, key_frame)?;
        if self.guidance == 1.0 {
            return Ok(cond);
        }
        let null = PromptEmbedding::null(self.prompt.dim());
        let uncond = predict_noise(xt, stack, &null, t, self.params, key_frame)?;
        cfg_combine(&uncond, &cond, self.guidance)
    }
}

impl NoisePredictor for GuidedDenoiser<'_> {
    fn predict(&self, xt: &LatentVideo, t: usize) -> Result<LatentVideo> {
        self.guided(xt, self.stack, t, self.key_frame)
    }
}

/// The starting latent `X_M` for an edit. Inversion runs with the source
/// prompt and no guidance.
pub fn initial_latent(
    x0: &LatentVideo,
    stack: &ControlStack,
    source: &PromptEmbedding,
    params: &ModelParams,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<LatentVideo> {
    let inverter = GuidedDenoiser {
        params,
        stack,
        prompt: source,
        guidance: 1.0,
        key_frame: 0,
    };
    make_initial_value(x0, sampler, &inverter, sched, &mut seeded(sampler.seed))
}

/// Samples from `x_init` at `sampler.start_timestep` down to 0 under the
/// target prompt.
pub fn sample_edit(
    x_init: &LatentVideo,
    stack: &ControlStack,
    target: &PromptEmbedding,
    params: &ModelParams,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<LatentVideo> {
    sampler.validate(sched)?;
    let model = GuidedDenoiser {
        params,
        stack,
        prompt: target,
        guidance: sampler.guidance_scale,
        key_frame: 0,
    };
    ddim_sample(x_init, &model, sched, sampler.start_timestep, sampler.steps)
}

/// Full short-video edit of `x0`.
pub fn edit_video(
    x0: &LatentVideo,
    stack: &ControlStack,
    source: &PromptEmbedding,
    target: &PromptEmbedding,
    params: &ModelParams,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<LatentVideo> {
    let x_init = initial_latent(x0, stack, source, params, sched, sampler)?;
    sample_edit(&x_init, stack, target, params, sched, sampler)
}
