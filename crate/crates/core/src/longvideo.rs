//! Long-video editing: overlapping windows fused by a weight function, plus
//! a key-frame video built from the first frame of every window.
//!
//! Frame indices here are 0-based; window `j` covers
//! `j * (L - a) .. min(j * (L - a) + L, N)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::diffusion::{ddim_step, timestep_grid, NoiseSchedule, SamplerConfig};
use crate::edit::GuidedDenoiser;
use crate::math::{cos, exp, sqrt};
use crate::model::{ControlStack, ModelParams, PromptEmbedding};
use crate::{Error, LatentVideo, Result};

/// Longest window `plan_windows` accepts.
pub const MAX_WINDOW_LEN: usize = 1024;

/// Overlapping windows over `frames` frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    frames: usize,
    window: usize,
    overlap: usize,
    windows: Vec<Range<usize>>,
}

impl WindowPlan {
    pub fn new(frames: usize, window: usize, overlap: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("window plan", "no frames"));
        }
        if window == 0 || window > MAX_WINDOW_LEN {
            return Err(Error::invalid("window length", format!("{window} not in 1..={MAX_WINDOW_LEN}")));
        }
        if overlap >= window {
            return Err(Error::invalid("overlap", format!("{overlap} must be below the window length {window}")));
        }
        let stride = window - overlap;
        // A video that fits in one window is not split.
        let count = if frames <= window {
            1
        } else {
            Self::formula_count(frames, window, overlap)
        };
        let windows = (0..count)
            .map(|j| j * stride)
            .filter(|&start| start < frames)
            .map(|start| start..(start + window).min(frames))
            .collect();
        Ok(WindowPlan {
            frames,
            window,
            overlap,
            windows,
        })
    }

    /// `floor(N / (L - a)) + 1`, which can include an empty trailing window.
    pub fn formula_count(frames: usize, window: usize, overlap: usize) -> usize {
        frames / (window - overlap) + 1
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn windows(&self) -> &[Range<usize>] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// First frame of every window: the key-frame video's frames.
    pub fn key_indices(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.start).collect()
    }
}

pub fn plan_windows(frames: usize, window: usize, overlap: usize) -> Result<WindowPlan> {
    WindowPlan::new(frames, window, overlap)
}

/// Edge value of the tapered weight shapes.
const FLOOR: f64 = 0.1;

/// Per-position fusion weights, evaluated at `u = l / len` for
/// `l = 1..=len`. Every shape is symmetric about `u = 1/2` and positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightFunction {
    Gaussian {
        sigma: f64,
    },
    Constant,
    /// Tent peaking at the midpoint.
    Linear,
    /// Concave cosine bump.
    Cosine,
    /// Convex `1 / sqrt` peak.
    InverseSqrt,
}

impl Default for WeightFunction {
    fn default() -> Self {
        WeightFunction::Gaussian { sigma: 0.1 }
    }
}

impl WeightFunction {
    pub fn all(sigma: f64) -> [WeightFunction; 5] {
        [
            WeightFunction::Gaussian { sigma },
            WeightFunction::Constant,
            WeightFunction::Linear,
            WeightFunction::Cosine,
            WeightFunction::InverseSqrt,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightFunction::Gaussian { .. } => "gaussian",
            WeightFunction::Constant => "constant",
            WeightFunction::Linear => "linear",
            WeightFunction::Cosine => "cosine",
            WeightFunction::InverseSqrt => "inverse_sqrt",
        }
    }

    pub fn from_name(name: &str, sigma: f64) -> Result<Self> {
        let f = match name {
            "gaussian" => WeightFunction::Gaussian { sigma },
            "constant" => WeightFunction::Constant,
            "linear" => WeightFunction::Linear,
            "cosine" => WeightFunction::Cosine,
            "inverse_sqrt" => WeightFunction::InverseSqrt,
            other => return Err(Error::invalid("weight function", format!("unknown kind {other:?}"))),
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightFunction::Gaussian { sigma } if !(sigma.is_finite() && *sigma > 0.0) => {
                Err(Error::invalid("gaussian sigma", format!("{sigma} must be finite and > 0")))
            }
            _ => Ok(()),
        }
    }

    /// Weight at position `u` in `(0, 1]`.
    pub fn at(&self, u: f64) -> f64 {
        let r = (2.0 * u - 1.0).abs();
        match *self {
            WeightFunction::Gaussian { sigma } => exp(-(u - 0.5) * (u - 0.5) / (2.0 * sigma * sigma)),
            WeightFunction::Constant => 1.0,
            WeightFunction::Linear => 1.0 - (1.0 - FLOOR) * r,
            WeightFunction::Cosine => FLOOR + (1.0 - FLOOR) * cos(core::f64::consts::FRAC_PI_2 * r),
            WeightFunction::InverseSqrt => sqrt(FLOOR / (r + FLOOR)),
        }
    }

    pub fn weights(&self, len: usize) -> Result<Vec<f64>> {
        eval_weights(self, len)
    }
}

pub fn eval_weights(f: &WeightFunction, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::invalid("weight length", "must be >= 1"));
    }
    f.validate()?;
    Ok((1..=len).map(|l| f.at(l as f64 / len as f64)).collect())
}

/// Normalized fusion coefficients per frame: `(window, offset, weight)` for
/// every window covering the frame, in window order.
pub fn fusion_coefficients(plan: &WindowPlan, f: &WeightFunction) -> Result<Vec<Vec<(usize, usize, f64)>>> {
    let mut per_frame: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); plan.frames];
    for (j, w) in plan.windows.iter().enumerate() {
        let ws = eval_weights(f, w.len())?;
        for (off, (i, wt)) in w.clone().zip(ws).enumerate() {
            per_frame[i].push((j, off, wt));
        }
    }
    for entries in &mut per_frame {
        let total: f64 = entries.iter().map(|e| e.2).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid("fusion weights", "weights underflowed to zero"));
        }
        for e in entries.iter_mut() {
            e.2 /= total;
        }
    }
    Ok(per_frame)
}

/// Merges per-window predictions into one `N`-frame prediction. Each frame
/// is the normalized weighted sum of the windows covering it.
pub fn fuse_windows(preds: &[LatentVideo], plan: &WindowPlan, f: &WeightFunction) -> Result<LatentVideo> {
    if preds.len() != plan.len() {
        return Err(Error::shape("window predictions", &[plan.len()], &[preds.len()]));
    }
    let [_, c, h, w] = preds[0].shape();
    for (p, win) in preds.iter().zip(&plan.windows) {
        if p.shape() != [win.len(), c, h, w] {
            return Err(Error::shape("window prediction", &[win.len(), c, h, w], &p.shape()));
        }
    }
    let coeffs = fusion_coefficients(plan, f)?;
    let mut out = LatentVideo::zeros(plan.frames, c, h, w);
    for (i, entries) in coeffs.iter().enumerate() {
        let dst = out.frame_mut(i);
        if let [(j, off, _)] = entries.as_slice() {
            dst.copy_from_slice(preds[*j].frame(*off));
            continue;
        }
        for &(j, off, wt) in entries {
            crate::math::axpy(wt, preds[j].frame(off), dst);
        }
    }
    Ok(out)
}

/// Frames at the plan's key indices, for the latents and every control.
pub fn extract_keyframe_video(xt: &LatentVideo, stack: &ControlStack, plan: &WindowPlan) -> Result<(LatentVideo, ControlStack)> {
    let idx = plan.key_indices();
    Ok((xt.gather_frames(&idx)?, stack.gather_frames(&idx)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyFusionMode {
    /// Blend only at key indices; other frames keep the window fusion.
    #[default]
    KeyFramesOnly,
    /// `w * O(eps_K) + (1 - w) * eps` everywhere, with zero-padded `O`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyFusionConfig {
    pub weight: f64,
    pub mode: KeyFusionMode,
}

impl Default for KeyFusionConfig {
    fn default() -> Self {
        KeyFusionConfig {
            weight: 0.3,
            mode: KeyFusionMode::KeyFramesOnly,
        }
    }
}

impl KeyFusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::invalid("key fusion weight", format!("{} not in [0, 1]", self.weight)));
        }
        Ok(())
    }
}

pub fn fuse_keyframe(fused: &LatentVideo, key_pred: &LatentVideo, plan: &WindowPlan, cfg: &KeyFusionConfig) -> Result<LatentVideo> {
    cfg.validate()?;
    let [n, c, h, w] = fused.shape();
    if n != plan.frames {
        return Err(Error::shape("fused prediction", &[plan.frames], &[n]));
    }
    if key_pred.shape() != [plan.len(), c, h, w] {
        return Err(Error::shape("key-frame prediction", &[plan.len(), c, h, w], &key_pred.shape()));
    }
    let wt = cfg.weight;
    if wt == 0.0 {
        return Ok(fused.clone());
    }
    let mut out = fused.clone();
    if cfg.mode == KeyFusionMode::Literal {
        for v in out.data_mut() {
            *v *= 1.0 - wt;
        }
    }
    for (k, i) in plan.key_indices().into_iter().enumerate() {
        let blend = match cfg.mode {
            KeyFusionMode::KeyFramesOnly => 1.0 - wt,
            KeyFusionMode::Literal => 1.0,
        };
        for (o, kp) in out.frame_mut(i).iter_mut().zip(key_pred.frame(k)) {
            *o = wt * kp + blend * *o;
        }
    }
    Ok(out)
}

/// Long-video settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongVideoConfig {
    pub window: usize,
    pub overlap: usize,
    pub weight_fn: WeightFunction,
    pub key_fusion: KeyFusionConfig,
}

impl Default for LongVideoConfig {
    fn default() -> Self {
        LongVideoConfig {
            window: 16,
            overlap: 8,
            weight_fn: WeightFunction::default(),
            key_fusion: KeyFusionConfig::default(),
        }
    }
}

impl LongVideoConfig {
    /// Hard errors for invalid values; soft warnings (also logged) for
    /// values outside the recommended ranges `a in [L/2, L)` and
    /// `w in [0.2, 0.5]`.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.weight_fn.validate()?;
        self.key_fusion.validate()?;
        if self.window == 0 || self.overlap >= self.window {
            return Err(Error::invalid(
                "overlap",
                format!("need 0 <= a < L, got a={}, L={}", self.overlap, self.window),
            ));
        }
        let mut warnings = Vec::new();
        if 2 * self.overlap < self.window {
            warnings.push(format!("overlap {} is below L/2 = {}", self.overlap, self.window as f64 / 2.0));
        }
        let w = self.key_fusion.weight;
        if !(0.2..=0.5).contains(&w) {
            warnings.push(format!("key fusion weight {w} is outside [0.2, 0.5]"));
        }
        for msg in &warnings {
            log::warn!("{msg}");
        }
        Ok(warnings)
    }
}

/// Evaluates `count` independent jobs. Implementations may run them in any
/// order or concurrently; results are returned by job index.
pub trait WindowRunner {
    fn run(&self, count: usize, job: &(dyn Fn(usize) -> Result<LatentVideo> + Sync)) -> Vec<Result<LatentVideo>>;
}

/// Runs jobs one after another in index order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl WindowRunner for Sequential {
    fn run(&self, count: usize, job: &(dyn Fn(usize) -> Result<LatentVideo> + Sync)) -> Vec<Result<LatentVideo>> {
        (0..count).map(job).collect()
    }
}

/// Optional per-step hook receiving `(timestep, per-frame coefficients)`.
pub type WeightDump<'a> = &'a mut dyn FnMut(usize, &[Vec<(usize, usize, f64)>]);

/// Denoises a long video from `x_init`: at every timestep each window is
/// predicted with its first frame as key frame, the windows are fused, the
/// key-frame video is predicted and blended in (only when there is more than
/// one window), and one DDIM step is taken.
#[allow(clippy::too_many_arguments)]
pub fn long_edit(
    x_init: &LatentVideo,
    stack: &ControlStack,
    target: &PromptEmbedding,
    params: &ModelParams,
    sched: &NoiseSchedule,
    cfg: &LongVideoConfig,
    sampler: &SamplerConfig,
    runner: &dyn WindowRunner,
    mut dump: Option<WeightDump<'_>>,
) -> Result<LatentVideo> {
    cfg.validate()?;
    sampler.validate(sched)?;
    let plan = WindowPlan::new(x_init.frames(), cfg.window, cfg.overlap)?;
    if let Some(n) = stack.frames() {
        if n != x_init.frames() {
            return Err(Error::shape("controls vs video", &[x_init.frames()], &[n]));
        }
    }
    let model = GuidedDenoiser {
        params,
        stack,
        prompt: target,
        guidance: sampler.guidance_scale,
        key_frame: 0,
    };
    let window_stacks = plan
        .windows()
        .iter()
        .map(|w| {
            if stack.is_empty() {
                Ok(ControlStack::new())
            } else {
                stack.slice_frames(w.start, w.len())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let coeffs = fusion_coefficients(&plan, &cfg.weight_fn)?;
    let grid = timestep_grid(sampler.start_timestep, sampler.steps)?;
    let mut x = x_init.clone();
    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied().unwrap_or(0);
        let xs = &x;
        let job = |j: usize| {
            let w = &plan.windows()[j];
            model.guided(&xs.slice_frames(w.start, w.len())?, &window_stacks[j], t, 0)
        };
        let preds = runner.run(plan.len(), &job).into_iter().collect::<Result<Vec<_>>>()?;
        let mut eps = fuse_windows(&preds, &plan, &cfg.weight_fn)?;
        if cfg.key_fusion.weight > 0.0 && plan.len() > 1 {
            let (xk, ck) = extract_keyframe_video(&x, stack, &plan)?;
            let ek = model.guided(&xk, &ck, t, 0)?;
            eps = fuse_keyframe(&eps, &ek, &plan, &cfg.key_fusion)?;
        }
        if let Some(d) = dump.as_mut() {
            d(t, &coeffs);
        }
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
    }
    Ok(x)
}
