//! One-shot fine-tuning of the denoiser on a single source video, and the
//! LoRA pre-training pass used for image-driven edits.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::math::sqrt;
use crate::model::{forward_graph, Binder, Branch, ControlStack, ForwardOptions, ModelParams, Param, ParamRole, PromptEmbedding};
use crate::rng::{normal_video, seeded, uniform_inclusive};
use crate::{Error, LatentVideo, Result};

/// Which parameters receive updates: any parameter whose role is listed and
/// whose name starts with the optional prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    roles: Vec<ParamRole>,
    prefix: Option<String>,
}

impl Default for TrainableSet {
    /// Key-frame `W_O` in both branches, every temporal projection and the
    /// temporal gates.
    fn default() -> Self {
        TrainableSet::new(vec![
            ParamRole::KeyFrameOutput(Branch::Main),
            ParamRole::KeyFrameOutput(Branch::Control),
            ParamRole::TemporalProjection,
            ParamRole::TemporalGate,
        ])
    }
}

impl TrainableSet {
    pub fn new(roles: Vec<ParamRole>) -> Self {
        TrainableSet { roles, prefix: None }
    }

    pub fn empty() -> Self {
        TrainableSet::new(Vec::new())
    }

    pub fn lora() -> Self {
        TrainableSet::new(vec![ParamRole::LoraFactor])
    }

    /// Restricts the set to names starting with `prefix`.
    pub fn with_prefix(mut self, prefix: &str) -> Self {
        self.prefix = Some(String::from(prefix));
        self
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn contains(&self, p: &Param) -> bool {
        self.roles.contains(&p.role) && self.prefix.as_deref().is_none_or(|pre| p.name.starts_with(pre))
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub trainable: TrainableSet,
    pub seed: u64,
    pub adam: AdamConfig,
    /// 0-based key frame used by key-frame attention during training.
    pub key_frame: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 300,
            learning_rate: 3e-5,
            trainable: TrainableSet::default(),
            seed: 0,
            adam: AdamConfig::default(),
            key_frame: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be finite and > 0"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::invalid("adam", "betas must lie in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// Fine-tuning budget for a control type, by its usual name.
pub fn default_iterations(control: &str) -> Option<usize> {
    match control {
        "canny" | "edge" => Some(80),
        "hed" => Some(300),
        "depth" => Some(500),
        "pose" => Some(1500),
        _ => None,
    }
}

/// Scalar count of the parameters `set` selects.
pub fn count_trainable(params: &ModelParams, set: &TrainableSet) -> usize {
    params.iter().filter(|p| set.contains(p)).map(|p| p.tensor.len()).sum()
}

/// `(parameter name, gradient)` pairs.
pub type NamedGradients = Vec<(String, Vec<f64>)>;

/// Loss `mean((eps - eps_theta(xt))^2)` and its gradient for every parameter
/// in `set`, keyed by name.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients(
    params: &ModelParams,
    xt: &LatentVideo,
    eps: &LatentVideo,
    stack: &ControlStack,
    prompt: &PromptEmbedding,
    t: usize,
    key_frame: usize,
    set: &TrainableSet,
) -> Result<(f64, NamedGradients)> {
    xt.same_shape(eps, "loss_and_gradients")?;
    let select = |p: &Param| set.contains(p);
    let mut b = Binder::new(params, Some(&select));
    let out = forward_graph(&mut b, xt, stack, prompt, t, key_frame, ForwardOptions::default())?;
    let loss = b.g.mse(out, eps.to_channels_last());
    let value = b.g.value(loss)[0];
    let mut grads = b.g.backward(loss);
    let named = b
        .bound
        .iter()
        .map(|(name, v)| (name.clone(), grads.take(*v).unwrap_or_else(|| vec![0.0; b.g.value(*v).len()])))
        .collect();
    Ok((value, named))
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(cfg: AdamConfig, lr: f64) -> Self {
        Adam {
            cfg,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: Vec<(String, Vec<f64>)>) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (name, g) in grads {
            let p = params.get_mut(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let (m, v) = self.moments.entry(name).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / (sqrt(*vi / c2) + eps);
            }
        }
        Ok(())
    }
}

fn run(
    clips: &[LatentVideo],
    stacks: &[ControlStack],
    prompt: &PromptEmbedding,
    params: &ModelParams,
    cfg: &TrainConfig,
    set: &TrainableSet,
    sched: &NoiseSchedule,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let mut params = params.clone();
    if cfg.iterations == 0 {
        return Ok((params, Vec::new()));
    }
    if count_trainable(&params, set) == 0 {
        return Err(Error::EmptyTrainableSet);
    }
    let mut rng = seeded(cfg.seed);
    let mut adam = Adam::new(cfg.adam, cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let k = it % clips.len();
        let x0 = &clips[k];
        let t = uniform_inclusive(&mut rng, 1, sched.steps());
        let eps = normal_video(&mut rng, x0.shape())?;
        let xt = forward_sample(x0, t, &eps, sched)?;
        let (loss, grads) = loss_and_gradients(&params, &xt, &eps, &stacks[k], prompt, t, cfg.key_frame, set)?;
        log::debug!("iteration {it}: t={t} loss={loss:.6}");
        trace.push(loss);
        adam.apply(&mut params, grads)?;
    }
    Ok((params, trace))
}

/// Fine-tunes the selected parameters on one source video: each iteration
/// draws `t ~ U[1, T]` and per-frame noise, and takes one Adam step on the
/// noise-prediction loss. Returns the updated parameters and the loss of
/// every iteration. LoRA factors cannot be part of the set.
pub fn one_shot_finetune(
    x0: &LatentVideo,
    stack: &ControlStack,
    prompt: &PromptEmbedding,
    params: &ModelParams,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(ModelParams, Vec<f64>)> {
    if cfg.trainable.roles().contains(&ParamRole::LoraFactor) {
        return Err(Error::invalid("trainable set", "LoRA factors stay frozen during fine-tuning"));
    }
    if let Some(n) = stack.frames() {
        if n != x0.frames() {
            return Err(Error::shape("controls vs video", &[x0.frames()], &[n]));
        }
    }
    run(
        core::slice::from_ref(x0),
        core::slice::from_ref(stack),
        prompt,
        params,
        cfg,
        &cfg.trainable,
        sched,
    )
}

/// Trains only the LoRA factors on single reference frames, cycling through
/// `images` in order, with no controls attached. `cfg.trainable` is ignored.
pub fn lora_pretrain(
    images: &[LatentVideo],
    prompt: &PromptEmbedding,
    params: &ModelParams,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(ModelParams, Vec<f64>)> {
    if params.lora_adapters().is_empty() {
        return Err(Error::NoAdapters);
    }
    if images.is_empty() {
        return Err(Error::invalid("reference images", "none given"));
    }
    if let Some(bad) = images.iter().find(|im| im.frames() != 1) {
        return Err(Error::invalid("reference images", alloc::format!("{} frames, expected 1", bad.frames())));
    }
    let stacks = vec![ControlStack::new(); images.len()];
    run(images, &stacks, prompt, params, cfg, &TrainableSet::lora(), sched)
}

/// Trailing moving average over `window` entries (shorter at the start).
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for (i, v) in trace.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= trace[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
