//! Timestep-indexed diffusion math: noise schedules, the closed-form forward
//! perturbation, deterministic DDIM sampling and inversion, classifier-free
//! guidance and the noise-prediction loss.
//!
//! Timesteps are 1-based (`1..=T`); timestep `0` denotes clean data with
//! `alpha_bar(0) = 1`. The update rules use the cumulative product
//! `alpha_bar`, not the per-step `alpha`.

use alloc::vec::Vec;

use rand::Rng;

use crate::math::{round, sqrt};
use crate::rng;
use crate::{Error, LatentVideo, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSchedule {
    Linear,
    /// Linear in `sqrt(beta)`, as used by latent diffusion models.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: BetaSchedule, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "T must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "schedule",
                alloc::format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
            ));
        }
        let lerp = |a: f64, b: f64, i: usize| {
            if steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (steps - 1) as f64
            }
        };
        let beta = match kind {
            BetaSchedule::Linear => (0..steps).map(|i| lerp(beta_start, beta_end, i)).collect(),
            BetaSchedule::ScaledLinear => (0..steps)
                .map(|i| {
                    let s = lerp(sqrt(beta_start), sqrt(beta_end), i);
                    s * s
                })
                .collect(),
        };
        Self::from_betas(beta)
    }

    /// Schedule from explicit per-step variances `beta_1..=beta_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule", "T must be at least 1"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid("schedule", alloc::format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |prod, a| {
                *prod *= a;
                Some(*prod)
            })
            .collect();
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    /// The 1000-step scaled-linear schedule of Stable Diffusion.
    pub fn stable_diffusion() -> Self {
        Self::new(1000, BetaSchedule::ScaledLinear, 0.000_85, 0.012).expect("valid constants")
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for `ab = alpha_bar(t)`.
pub fn forward_sample(x0: &LatentVideo, t: usize, eps: &LatentVideo, sched: &NoiseSchedule) -> Result<LatentVideo> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    x0.lincomb(sqrt(ab), eps, sqrt(1.0 - ab))
        .map_err(|_| Error::shape("forward_sample", &x0.shape(), &eps.shape()))
}

/// Moves a latent from `from` to `to` along the deterministic DDIM path
/// given a noise prediction. Used in both directions.
fn ddim_transfer(x: &LatentVideo, eps: &LatentVideo, ab_from: f64, ab_to: f64, op: &'static str) -> Result<LatentVideo> {
    x.same_shape(eps, op)?;
    let (sf, st) = (sqrt(ab_from), sqrt(ab_to));
    let (nf, nt) = (sqrt(1.0 - ab_from), sqrt(1.0 - ab_to));
    let data = x.data().iter().zip(eps.data()).map(|(xv, e)| st * (xv - nf * e) / sf + nt * e).collect();
    LatentVideo::from_vec(x.shape(), data)
}

/// One deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_step(xt: &LatentVideo, eps_pred: &LatentVideo, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<LatentVideo> {
    if t_prev >= t {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    sched.check_t(t)?;
    ddim_transfer(xt, eps_pred, sched.alpha_bar(t), sched.alpha_bar(t_prev), "ddim_step")
}

/// One DDIM inversion update from `t_prev` up to `t`; `eps_pred` is the
/// prediction at `(x_prev, t_prev)`.
pub fn ddim_invert_step(x_prev: &LatentVideo, eps_pred: &LatentVideo, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<LatentVideo> {
    if t_prev >= t {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    sched.check_t(t)?;
    ddim_transfer(x_prev, eps_pred, sched.alpha_bar(t_prev), sched.alpha_bar(t), "ddim_invert_step")
}

/// Classifier-free guidance: `uncond + s * (cond - uncond)`.
///
/// `s = 0` and `s = 1` return the corresponding input unchanged.
pub fn cfg_combine(eps_uncond: &LatentVideo, eps_cond: &LatentVideo, s: f64) -> Result<LatentVideo> {
    eps_uncond.same_shape(eps_cond, "cfg_combine")?;
    if s.is_nan() || s < 0.0 {
        return Err(Error::invalid("guidance scale", alloc::format!("{s} must be >= 0")));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let data = eps_uncond.data().iter().zip(eps_cond.data()).map(|(u, c)| u + s * (c - u)).collect();
    LatentVideo::from_vec(eps_uncond.shape(), data)
}

/// Mean squared difference between true and predicted noise.
pub fn training_residual(eps: &LatentVideo, eps_pred: &LatentVideo) -> Result<f64> {
    eps.same_shape(eps_pred, "training_residual")?;
    let sum: f64 = eps.data().iter().zip(eps_pred.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.data().len() as f64)
}

/// Descending timesteps for `steps` DDIM updates starting at `start`:
/// uniform stride over `[1, start]`, largest first. The update after the
/// last entry goes to timestep 0.
pub fn timestep_grid(start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > start {
        return Err(Error::invalid(
            "sampler steps",
            alloc::format!("need 1 <= steps <= start timestep, got steps={steps}, start={start}"),
        ));
    }
    Ok((1..=steps)
        .rev()
        .map(|k| round(k as f64 * start as f64 / steps as f64) as usize)
        .collect())
}

/// Anything that predicts noise for a latent at a timestep.
pub trait NoisePredictor {
    fn predict(&self, xt: &LatentVideo, t: usize) -> Result<LatentVideo>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&LatentVideo, usize) -> Result<LatentVideo>,
{
    fn predict(&self, xt: &LatentVideo, t: usize) -> Result<LatentVideo> {
        self(xt, t)
    }
}

/// DDIM inversion from clean data up to `start` over `steps` updates.
pub fn ddim_invert(x0: &LatentVideo, model: &dyn NoisePredictor, sched: &NoiseSchedule, start: usize, steps: usize) -> Result<LatentVideo> {
    sched.check_t(start)?;
    let mut grid = timestep_grid(start, steps)?;
    grid.reverse();
    let mut x = x0.clone();
    let mut t_prev = 0;
    for t in grid {
        let eps = model.predict(&x, t_prev)?;
        x = ddim_invert_step(&x, &eps, t, t_prev, sched)?;
        t_prev = t;
    }
    Ok(x)
}

/// Deterministic DDIM sampling from `start` down to clean data.
pub fn ddim_sample(x_start: &LatentVideo, model: &dyn NoisePredictor, sched: &NoiseSchedule, start: usize, steps: usize) -> Result<LatentVideo> {
    sched.check_t(start)?;
    let grid = timestep_grid(start, steps)?;
    let mut x = x_start.clone();
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict(&x, t)?;
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Invert the source video with DDIM up to the start timestep.
    DdimInversion,
    /// Perturb the source video to the start timestep with noise shared by all frames.
    NoisySource,
    /// Pure standard-normal noise, shared by all frames.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub init_mode: InitMode,
    /// Start timestep `M`.
    pub start_timestep: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            guidance_scale: 12.0,
            init_mode: InitMode::DdimInversion,
            start_timestep: 1000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.start_timestep > sched.steps() {
            return Err(Error::TimestepOutOfRange {
                t: self.start_timestep,
                max: sched.steps(),
            });
        }
        if self.guidance_scale.is_nan() || self.guidance_scale < 0.0 {
            return Err(Error::invalid("guidance scale", "must be >= 0"));
        }
        timestep_grid(self.start_timestep, self.steps).map(|_| ())
    }
}

/// Builds the sampling start point `X_M` according to `cfg.init_mode`.
///
/// `inverter` is only called in [`InitMode::DdimInversion`]; it should
/// predict noise with the source prompt and unit guidance.
pub fn make_initial_value(
    x0: &LatentVideo,
    cfg: &SamplerConfig,
    inverter: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentVideo> {
    cfg.validate(sched)?;
    match cfg.init_mode {
        InitMode::DdimInversion => ddim_invert(x0, inverter, sched, cfg.start_timestep, cfg.steps),
        InitMode::NoisySource => {
            let eps = rng::shared_normal_video(rng, x0.shape())?;
            forward_sample(x0, cfg.start_timestep, &eps, sched)
        }
        InitMode::Gaussian => rng::shared_normal_video(rng, x0.shape()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn scalar(v: f64) -> LatentVideo {
        LatentVideo::from_vec([1, 1, 1, 1], vec![v]).unwrap()
    }

    /// Schedule with `alpha_bar(1) = a1`, `alpha_bar(2) = a2`.
    fn two_step(a1: f64, a2: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - a1, 1.0 - a2 / a1]).unwrap()
    }

    #[test]
    fn constant_beta_products() {
        let s = NoiseSchedule::new(3, BetaSchedule::Linear, 0.1, 0.1).unwrap();
        let expected = [0.9, 0.81, 0.729];
        for (t, e) in (1..=3).zip(expected) {
            assert!((s.alpha_bar(t) - e).abs() < 1e-15);
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
        let one = NoiseSchedule::new(1, BetaSchedule::Linear, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1), 0.5);
    }

    #[test]
    fn schedule_rejects_bad_domain() {
        assert!(NoiseSchedule::new(10, BetaSchedule::Linear, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(0, BetaSchedule::Linear, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(10, BetaSchedule::Linear, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(10, BetaSchedule::ScaledLinear, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_sample_scalar() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = forward_sample(&scalar(2.0), 1, &scalar(1.0), &s).unwrap();
        assert!((out.data()[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((out.data()[0] - 1.8660).abs() < 1e-4);

        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let out = forward_sample(&scalar(3.0), 1, &scalar(0.0), &s).unwrap();
        assert!((out.data()[0] - 2.4).abs() < 1e-12);

        let id = forward_sample(&scalar(3.0), 0, &scalar(5.0), &s).unwrap();
        assert_eq!(id.data()[0], 3.0);
    }

    #[test]
    fn forward_sample_shape_mismatch() {
        let s = NoiseSchedule::stable_diffusion();
        let a = LatentVideo::zeros(2, 1, 2, 2);
        let b = LatentVideo::zeros(1, 1, 2, 2);
        assert!(matches!(forward_sample(&a, 10, &b, &s), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ddim_step_scalar() {
        let s = two_step(0.81, 0.64);
        let out = ddim_step(&scalar(1.0), &scalar(0.5), 2, 1, &s).unwrap();
        let expected = 0.9 * (1.0 - 0.6 * 0.5) / 0.8 + 0.19f64.sqrt() * 0.5;
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((out.data()[0] - 1.00545).abs() < 1e-4);

        let zero = ddim_step(&scalar(1.0), &scalar(0.0), 2, 1, &s).unwrap();
        assert!((zero.data()[0] - (0.81f64 / 0.64).sqrt()).abs() < 1e-12);
        assert!(matches!(
            ddim_step(&scalar(1.0), &scalar(0.0), 1, 1, &s),
            Err(Error::TimestepOrder { .. })
        ));
        assert!(ddim_invert_step(&scalar(1.0), &scalar(0.0), 1, 2, &s).is_err());
    }

    #[test]
    fn ddim_invert_zero_prediction() {
        let s = two_step(0.81, 0.64);
        let out = ddim_invert_step(&scalar(2.0), &scalar(0.0), 2, 1, &s).unwrap();
        assert!((out.data()[0] - 2.0 * (0.64f64 / 0.81).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cfg_endpoints_are_exact() {
        let u = LatentVideo::from_vec([1, 1, 1, 3], vec![0.1, -0.7, 3.3]).unwrap();
        let c = LatentVideo::from_vec([1, 1, 1, 3], vec![1.9, 0.2, -5.1]).unwrap();
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let g = cfg_combine(&u, &c, 12.0).unwrap();
        assert!((g.data()[0] - (0.1 + 12.0 * 1.8)).abs() < 1e-12);
        assert!(cfg_combine(&u, &c, -1.0).is_err());
        assert_eq!(SamplerConfig::default().guidance_scale, 12.0);
    }

    #[test]
    fn residual_values() {
        assert_eq!(training_residual(&scalar(1.0), &scalar(1.0)).unwrap(), 0.0);
        assert_eq!(training_residual(&scalar(1.0), &scalar(0.0)).unwrap(), 1.0);
        let a = LatentVideo::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let b = LatentVideo::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(training_residual(&a, &b).unwrap(), 2.5);
    }

    #[test]
    fn grid_is_uniform_and_descending() {
        assert_eq!(timestep_grid(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        assert_eq!(timestep_grid(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        let g = timestep_grid(1000, 50).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!((g[0], g[49]), (1000, 20));
        assert!(timestep_grid(3, 4).is_err());
        assert!(timestep_grid(3, 0).is_err());
    }

    #[test]
    fn zero_denoiser_inversion_scales_source() {
        let s = NoiseSchedule::stable_diffusion();
        let x0 = LatentVideo::from_vec([2, 1, 1, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let zero = |x: &LatentVideo, _t: usize| Ok(LatentVideo::zeros(x.frames(), x.channels(), x.height(), x.width()));
        let cfg = SamplerConfig {
            steps: 20,
            start_timestep: 600,
            ..SamplerConfig::default()
        };
        let mut r = rng::seeded(1);
        let xm = make_initial_value(&x0, &cfg, &zero, &s, &mut r).unwrap();
        let k = s.alpha_bar(600).sqrt();
        for (a, b) in xm.data().iter().zip(x0.data()) {
            assert!((a - k * b).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_noise_init_modes() {
        let s = NoiseSchedule::stable_diffusion();
        let x0 = LatentVideo::from_vec([3, 1, 2, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        let never = |_: &LatentVideo, _: usize| -> Result<LatentVideo> { panic!("not used") };
        let gauss = SamplerConfig {
            init_mode: InitMode::Gaussian,
            ..SamplerConfig::default()
        };
        let xm = make_initial_value(&x0, &gauss, &never, &s, &mut rng::seeded(3)).unwrap();
        assert_eq!(xm.frame(0), xm.frame(1));
        assert_eq!(xm.frame(0), xm.frame(2));

        // Noise is shared, so frame differences are the scaled source differences.
        let noisy = SamplerConfig {
            init_mode: InitMode::NoisySource,
            start_timestep: 500,
            ..SamplerConfig::default()
        };
        let xm = make_initial_value(&x0, &noisy, &never, &s, &mut rng::seeded(3)).unwrap();
        let k = s.alpha_bar(500).sqrt();
        for i in 0..4 {
            let d = xm.frame(1)[i] - xm.frame(0)[i];
            assert!((d - k * 4.0).abs() < 1e-9);
        }

        let tiny = NoiseSchedule::from_betas(vec![1e-14]).unwrap();
        let near = SamplerConfig {
            init_mode: InitMode::NoisySource,
            start_timestep: 1,
            steps: 1,
            ..SamplerConfig::default()
        };
        let xm = make_initial_value(&x0, &near, &never, &tiny, &mut rng::seeded(3)).unwrap();
        for (a, b) in xm.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    /// Fixed linear denoiser `eps(x, t) = 0.5 x`.
    pub(crate) fn half_linear(x: &LatentVideo, _t: usize) -> Result<LatentVideo> {
        LatentVideo::from_vec(x.shape(), x.data().iter().map(|v| 0.5 * v).collect())
    }

    #[test]
    fn inversion_then_sampling_converges_with_steps() {
        let s = NoiseSchedule::stable_diffusion();
        let x0 = rng::normal_video(&mut rng::seeded(9), [2, 2, 4, 4]).unwrap();
        let model = half_linear;
        let norm = |v: &LatentVideo| v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let errs: Vec<f64> = [10, 25, 50]
            .iter()
            .map(|&steps| {
                let xm = ddim_invert(&x0, &model, &s, 1000, steps).unwrap();
                let back = ddim_sample(&xm, &model, &s, 1000, steps).unwrap();
                norm(&back.lincomb(1.0, &x0, -1.0).unwrap()) / norm(&x0)
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 0.05, "{errs:?}");
    }

    proptest! {
        #[test]
        fn schedule_invariants(t in 1usize..300, lo in 1e-5f64..0.05, span in 0.0f64..0.3, scaled in any::<bool>()) {
            let kind = if scaled { BetaSchedule::ScaledLinear } else { BetaSchedule::Linear };
            let s = NoiseSchedule::new(t, kind, lo, lo + span).unwrap();
            let mut prev = 1.0;
            for k in 1..=t {
                prop_assert_eq!(s.alpha(k), 1.0 - s.beta(k));
                prop_assert!(s.alpha_bar(k) < prev && s.alpha_bar(k) > 0.0);
                prop_assert_eq!(s.alpha_bar(k), s.alpha_bar(k - 1) * s.alpha(k));
                prev = s.alpha_bar(k);
            }
        }

        #[test]
        fn invert_then_step_is_identity(x in -5.0f64..5.0, e in -3.0f64..3.0, t_prev in 0usize..999, gap in 1usize..200) {
            let s = NoiseSchedule::stable_diffusion();
            let t = (t_prev + gap).min(1000);
            let up = ddim_invert_step(&scalar(x), &scalar(e), t, t_prev, &s).unwrap();
            let down = ddim_step(&up, &scalar(e), t, t_prev, &s).unwrap();
            prop_assert!((down.data()[0] - x).abs() < 1e-10);
        }

        #[test]
        fn forward_sample_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, t in 1usize..1000) {
            let s = NoiseSchedule::stable_diffusion();
            let x = LatentVideo::from_vec([1, 1, 1, 2], vec![a, b]).unwrap();
            let e = LatentVideo::from_vec([1, 1, 1, 2], vec![b, -a]).unwrap();
            let sum = forward_sample(&x.lincomb(2.0, &x, 0.0).unwrap(), t, &e.lincomb(2.0, &e, 0.0).unwrap(), &s).unwrap();
            let single = forward_sample(&x, t, &e, &s).unwrap();
            for (p, q) in sum.data().iter().zip(single.data()) {
                prop_assert!((p - 2.0 * q).abs() < 1e-12);
            }
        }

        #[test]
        fn cfg_fixed_point(v in -10.0f64..10.0, s in 0.0f64..20.0) {
            let u = scalar(v);
            let out = cfg_combine(&u, &u, s).unwrap();
            prop_assert_eq!(out.data()[0], v);
        }
    }
}
