use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::attention::{key_frame_graph, temporal_delta_graph, AttnVars};
use super::{AttentionWeights, Branch, ControlStack, LoraAdapter, ModelConfig, Param, ParamRole, PromptEmbedding};
use crate::autodiff::{Graph, Var};
use crate::math::{cos, exp, ln, sin, sqrt};
use crate::rng::{seeded, standard_normal, SeededRng};
use crate::{Error, LatentVideo, Result, Tensor};

const MAIN_STAGES: [&str; 5] = ["down1", "down2", "mid", "up2", "up1"];
const CONTROL_STAGES: [&str; 3] = ["down1", "down2", "mid"];
const ATTN_MATS: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Branch switches for the forward pass. Turning a branch off removes it
/// from the network entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub temporal: bool,
    pub control: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            temporal: true,
            control: true,
        }
    }
}

fn has_temporal(stage: &str) -> bool {
    stage != "mid"
}

pub(crate) fn role_for(name: &str) -> ParamRole {
    if name.starts_with("lora.") {
        ParamRole::LoraFactor
    } else if name.ends_with(".attn.kf.wo") {
        if name.starts_with("main.") {
            ParamRole::KeyFrameOutput(Branch::Main)
        } else {
            ParamRole::KeyFrameOutput(Branch::Control)
        }
    } else if name.ends_with(".attn.temporal.gate") {
        ParamRole::TemporalGate
    } else if name.contains(".attn.temporal.") {
        ParamRole::TemporalProjection
    } else if name.contains(".zero.") {
        ParamRole::ControlGate
    } else {
        ParamRole::Base
    }
}

/// Every weight of the denoiser, addressed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    lora: Vec<LoraAdapter>,
}

struct Init<'r> {
    rng: &'r mut SeededRng,
    params: Vec<Param>,
}

impl Init<'_> {
    fn push(&mut self, name: String, tensor: Tensor) {
        let role = role_for(&name);
        self.params.push(Param::new(name, role, tensor));
    }

    fn random(&mut self, name: String, out: usize, inp: usize, gain: f64) {
        let scale = gain / sqrt(inp as f64);
        let data = standard_normal(self.rng, out * inp).into_iter().map(|v| v * scale).collect();
        self.push(name, Tensor::from_vec(&[out, inp], data).expect("shape"));
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.push(name, Tensor::zeros(shape));
    }

    fn dense(&mut self, prefix: &str, out: usize, inp: usize, gain: f64) {
        self.random(format!("{prefix}.w"), out, inp, gain);
        self.zeros(format!("{prefix}.b"), &[out]);
    }

    /// Copies every tensor under `from.` to `to.`, skipping names for which
    /// `skip` holds.
    fn copy_prefix(&mut self, from: &str, to: &str, skip: impl Fn(&str) -> bool) {
        let from = format!("{from}.");
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|p| {
                p.name
                    .strip_prefix(&from)
                    .filter(|rest| !skip(rest))
                    .map(|rest| (format!("{to}.{rest}"), p.tensor.clone()))
            })
            .collect();
        for (name, t) in copies {
            self.push(name, t);
        }
    }

    fn stage(&mut self, prefix: &str, cfg: &ModelConfig, temporal: bool) {
        let d = cfg.width;
        self.dense(&format!("{prefix}.res.conv1"), d, d * 9, 1.0);
        self.dense(&format!("{prefix}.res.temb"), d, d, 1.0);
        self.dense(&format!("{prefix}.res.conv2"), d, d * 9, 1.0);
        for m in ATTN_MATS {
            self.random(format!("{prefix}.attn.kf.{m}"), d, d, 1.0);
        }
        if temporal {
            // The temporal branch starts as a copy of the key-frame weights.
            for m in ATTN_MATS {
                let src = self.params.iter().rev().find(|p| p.name == format!("{prefix}.attn.kf.{m}")).expect("kf");
                let t = src.tensor.clone();
                self.push(format!("{prefix}.attn.temporal.{m}"), t);
            }
            self.zeros(format!("{prefix}.attn.temporal.gate"), &[d, d]);
        }
        self.random(format!("{prefix}.attn.cross.wq"), d, d, 1.0);
        self.random(format!("{prefix}.attn.cross.wk"), d, cfg.text_dim, 1.0);
        self.random(format!("{prefix}.attn.cross.wv"), d, cfg.text_dim, 1.0);
        self.random(format!("{prefix}.attn.cross.wo"), d, d, 1.0);
        self.dense(&format!("{prefix}.attn.ff1"), d * cfg.ff_mult, d, 1.0);
        self.dense(&format!("{prefix}.attn.ff2"), d, d * cfg.ff_mult, 1.0);
    }
}

impl ModelParams {
    /// Fresh weights: random base layers, key-frame and temporal projections
    /// equal, control branches copied from the main encoder, all gates zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut rng = seeded(seed);
        let mut init = Init {
            rng: &mut rng,
            params: Vec::new(),
        };
        init.dense("main.time", d, d, 1.0);
        init.dense("main.conv_in", d, config.latent_channels * 9, 1.0);
        for stage in MAIN_STAGES {
            init.stage(&format!("main.{stage}"), &config, has_temporal(stage));
        }
        init.dense("main.conv_out", config.latent_channels, d * 9, config.out_gain);
        for i in 0..config.control_branches {
            let prefix = format!("control{i}");
            init.dense(&format!("{prefix}.cond"), d, config.control_channels * 9, 1.0);
            init.copy_prefix("main.conv_in", &format!("{prefix}.conv_in"), |_| false);
            for stage in CONTROL_STAGES {
                init.copy_prefix(&format!("main.{stage}"), &format!("{prefix}.{stage}"), |rest| {
                    rest.starts_with("attn.temporal.")
                });
                init.zeros(format!("{prefix}.zero.{stage}.w"), &[d, d]);
                init.zeros(format!("{prefix}.zero.{stage}.b"), &[d]);
            }
        }
        let params = init.params;
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(ModelParams {
            config,
            params,
            index,
            lora: Vec::new(),
        })
    }

    /// Rebuilds parameters from named tensors. Every base weight must be
    /// present with its expected shape; `lora` lists `(target, scale)` for
    /// adapters whose factors appear as `lora.<target>.a` / `.b`.
    pub fn restore(config: ModelConfig, tensors: Vec<(String, Tensor)>, lora: &[(String, f64)]) -> Result<Self> {
        let mut out = ModelParams::new(config, 0)?;
        let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if named.insert(name.clone(), t).is_some() {
                return Err(Error::invalid("checkpoint", format!("duplicate tensor {name}")));
            }
        }
        for p in &mut out.params {
            let t = named
                .remove(&p.name)
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::shape("checkpoint tensor", p.tensor.shape(), t.shape()));
            }
            p.tensor = t;
        }
        for (target, scale) in lora {
            let base = out
                .get(target)
                .ok_or_else(|| Error::UnknownParameter(target.clone()))?
                .tensor
                .shape()
                .to_vec();
            let mut take = |suffix: &str| {
                named
                    .remove(&format!("lora.{target}.{suffix}"))
                    .ok_or_else(|| Error::invalid("checkpoint", format!("missing lora.{target}.{suffix}")))
            };
            let (a, b) = (take("a")?, take("b")?);
            if a.shape().len() != 2 || b.shape() != [base[0], a.shape()[0]] || a.shape()[1] != base[1] {
                return Err(Error::shape("lora factors", &base, b.shape()));
            }
            let mut adapter = LoraAdapter::new(target, base[0], base[1], a.shape()[0], *scale, 0)?;
            adapter.a.tensor = a;
            adapter.b.tensor = b;
            out.set_lora(adapter);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Weights other than LoRA factors, in construction order.
    pub fn base_params(&self) -> &[Param] {
        &self.params
    }

    pub fn lora_adapters(&self) -> &[LoraAdapter] {
        &self.lora
    }

    pub(crate) fn lora_for(&self, target: &str) -> Option<&LoraAdapter> {
        self.lora.iter().find(|l| l.target == target)
    }

    pub(crate) fn set_lora(&mut self, adapter: LoraAdapter) {
        match self.lora.iter_mut().find(|l| l.target == adapter.target) {
            Some(slot) => *slot = adapter,
            None => self.lora.push(adapter),
        }
    }

    /// All parameters: base weights, then each adapter's `A` and `B`.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().chain(self.lora.iter().flat_map(|l| [&l.a, &l.b]))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut().chain(self.lora.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        match self.index.get(name) {
            Some(&i) => Some(&self.params[i]),
            None => self.iter().find(|p| p.name == name),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.params[i]),
            None => self.iter_mut().find(|p| p.name == name),
        }
    }

    /// Projections of one attention site, e.g. `main.down1.attn.kf`.
    pub fn attention(&self, site: &str) -> Option<AttentionWeights> {
        let get = |m: &str| self.get(&format!("{site}.{m}")).cloned();
        Some(AttentionWeights {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }

    /// Total scalar count over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Graph construction context: binds parameters as leaves (once each) and
/// folds LoRA updates into their target weights.
pub(crate) struct Binder<'a> {
    pub g: Graph,
    params: &'a ModelParams,
    trainable: Option<&'a dyn Fn(&Param) -> bool>,
    /// Leaves that require gradients, by parameter name.
    pub bound: Vec<(String, Var)>,
    cache: BTreeMap<&'a str, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ModelParams, trainable: Option<&'a dyn Fn(&Param) -> bool>) -> Self {
        Binder {
            g: Graph::new(),
            params,
            trainable,
            bound: Vec::new(),
            cache: BTreeMap::new(),
        }
    }

    fn leaf(&mut self, p: &Param) -> Var {
        let rg = self.trainable.is_some_and(|f| f(p));
        let v = self.g.leaf(p.tensor.data().to_vec(), p.tensor.shape(), rg);
        if rg {
            self.bound.push((p.name.clone(), v));
        }
        v
    }

    /// Effective weight `name`, including any LoRA update.
    pub fn w(&mut self, name: &str) -> Var {
        if let Some(&v) = self.cache.get(name) {
            return v;
        }
        let params = self.params;
        let p = params.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let mut v = self.leaf(p);
        if let Some(l) = params.lora_for(name) {
            let a = self.leaf(&l.a);
            let b = self.leaf(&l.b);
            let ba = self.g.matmul(b, a);
            let delta = self.g.scale(ba, l.scale);
            v = self.g.add(v, delta);
        }
        self.cache.insert(&p.name, v);
        v
    }

    fn dense(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.w(&format!("{prefix}.w"));
        let b = self.w(&format!("{prefix}.b"));
        let y = self.g.linear(x, w);
        self.g.add_bias(y, b)
    }

    /// 3x3 frame-wise convolution, `[F, H, W, Cin] -> [F, H, W, Cout]`.
    fn conv(&mut self, x: Var, prefix: &str) -> Var {
        let cols = self.g.im2col(x);
        self.dense(cols, prefix)
    }

    fn attn_vars(&mut self, site: &str) -> AttnVars {
        AttnVars {
            wq: self.w(&format!("{site}.wq")),
            wk: self.w(&format!("{site}.wk")),
            wv: self.w(&format!("{site}.wv")),
            wo: self.w(&format!("{site}.wo")),
        }
    }

    fn norm_act(&mut self, x: Var) -> Var {
        let n = self.g.layer_norm(x);
        self.g.silu(n)
    }

    fn res_block(&mut self, x: Var, prefix: &str, temb: Var) -> Var {
        let n1 = self.norm_act(x);
        let c1 = self.conv(n1, &format!("{prefix}.conv1"));
        let tp = self.dense(temb, &format!("{prefix}.temb"));
        let c1 = self.g.add_bias(c1, tp);
        let n2 = self.norm_act(c1);
        let c2 = self.conv(n2, &format!("{prefix}.conv2"));
        self.g.add(x, c2)
    }

    fn transformer(&mut self, x: Var, prefix: &str, prompt: Var, key: usize, temporal: bool) -> Var {
        let shape = self.g.shape(x).to_vec();
        let (f, sites, d) = (shape[0], shape[1] * shape[2], shape[3]);
        let seq = self.g.reshape(x, &[f, sites, d]);

        let n = self.g.layer_norm(seq);
        let kf = self.attn_vars(&format!("{prefix}.kf"));
        let mut a = key_frame_graph(&mut self.g, n, &kf, key);
        if temporal {
            let tv = self.attn_vars(&format!("{prefix}.temporal"));
            let gate = self.w(&format!("{prefix}.temporal.gate"));
            let delta = temporal_delta_graph(&mut self.g, n, &tv, gate);
            a = self.g.add(a, delta);
        }
        let h1 = self.g.add(seq, a);

        let n = self.g.layer_norm(h1);
        let cv = self.attn_vars(&format!("{prefix}.cross"));
        let q = self.g.linear(n, cv.wq);
        let k = self.g.linear(prompt, cv.wk);
        let v = self.g.linear(prompt, cv.wv);
        let att = self.g.attention(q, k, v, vec![0; f]);
        let o = self.g.linear(att, cv.wo);
        let h2 = self.g.add(h1, o);

        let n = self.g.layer_norm(h2);
        let z = self.dense(n, &format!("{prefix}.ff1"));
        let z = self.g.silu(z);
        let z = self.dense(z, &format!("{prefix}.ff2"));
        let h3 = self.g.add(h2, z);
        self.g.reshape(h3, &shape)
    }

    fn stage(&mut self, x: Var, prefix: &str, ctx: &Ctx, temporal: bool) -> Var {
        let r = self.res_block(x, &format!("{prefix}.res"), ctx.temb);
        self.transformer(r, &format!("{prefix}.attn"), ctx.prompt, ctx.key, temporal)
    }

    fn time_embedding(&mut self, t: usize) -> Var {
        let d = self.params.config.width;
        let half = d / 2;
        let mut e = vec![0.0; d];
        for k in 0..half {
            let freq = exp(-ln(10_000.0) * k as f64 / half as f64);
            e[k] = sin(t as f64 * freq);
            e[half + k] = cos(t as f64 * freq);
        }
        let leaf = self.g.leaf(e, &[1, d], false);
        let h = self.dense(leaf, "main.time");
        self.g.silu(h)
    }

    fn gated(&mut self, r: Var, prefix: &str, lambda: f64) -> Var {
        let z = self.dense(r, prefix);
        self.g.scale(z, lambda)
    }
}

struct Ctx {
    temb: Var,
    prompt: Var,
    key: usize,
}

fn check_inputs(params: &ModelParams, xt: &LatentVideo, stack: &ControlStack, prompt: &PromptEmbedding, key_frame: usize) -> Result<()> {
    let cfg = &params.config;
    let [n, c, h, w] = xt.shape();
    if c != cfg.latent_channels {
        return Err(Error::shape("latent channels", &[cfg.latent_channels], &[c]));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid("latent size", format!("{h}x{w} must be divisible by 4")));
    }
    if key_frame >= n {
        return Err(Error::IndexOutOfRange {
            what: "key frame",
            index: key_frame,
            len: n,
        });
    }
    if stack.len() > cfg.control_branches {
        return Err(Error::invalid(
            "controls",
            format!("{} controls for {} branches", stack.len(), cfg.control_branches),
        ));
    }
    stack.check(n, h, w)?;
    for ctrl in stack.controls() {
        if ctrl.condition().channels() != cfg.control_channels {
            return Err(Error::shape("control channels", &[cfg.control_channels], &[ctrl.condition().channels()]));
        }
    }
    if prompt.dim() != cfg.text_dim {
        return Err(Error::shape("prompt width", &[cfg.text_dim], &[prompt.dim()]));
    }
    Ok(())
}

/// Builds the forward pass on `b.g`; returns the channels-last noise
/// prediction `[N, H, W, C]`.
pub(crate) fn forward_graph(
    b: &mut Binder<'_>,
    xt: &LatentVideo,
    stack: &ControlStack,
    prompt: &PromptEmbedding,
    t: usize,
    key_frame: usize,
    opts: ForwardOptions,
) -> Result<Var> {
    check_inputs(b.params, xt, stack, prompt, key_frame)?;
    let [n, c, h, w] = xt.shape();
    let x = b.g.leaf(xt.to_channels_last(), &[n, h, w, c], false);
    let p = prompt.tokens();
    let pv = b.g.leaf(p.data().to_vec(), &[1, p.shape()[0], p.shape()[1]], false);
    let ctx = Ctx {
        temb: b.time_embedding(t),
        prompt: pv,
        key: key_frame,
    };

    let h0 = b.conv(x, "main.conv_in");
    let mut s1 = b.stage(h0, "main.down1", &ctx, opts.temporal);
    let p1 = b.g.avg_pool2(s1);
    let mut s2 = b.stage(p1, "main.down2", &ctx, opts.temporal);
    let p2 = b.g.avg_pool2(s2);
    let mut m = b.stage(p2, "main.mid", &ctx, false);

    if opts.control {
        for (i, ctrl) in stack.controls().iter().enumerate() {
            if ctrl.scale() == 0.0 {
                continue;
            }
            let cond = ctrl.masked_condition();
            let cc = cond.channels();
            let cv = b.g.leaf(cond.to_channels_last(), &[n, h, w, cc], false);
            let prefix = format!("control{i}");
            let e = b.conv(cv, &format!("{prefix}.cond"));
            let hin = b.conv(x, &format!("{prefix}.conv_in"));
            let hc = b.g.add(hin, e);
            let r1 = b.stage(hc, &format!("{prefix}.down1"), &ctx, false);
            let q1 = b.g.avg_pool2(r1);
            let r2 = b.stage(q1, &format!("{prefix}.down2"), &ctx, false);
            let q2 = b.g.avg_pool2(r2);
            let r3 = b.stage(q2, &format!("{prefix}.mid"), &ctx, false);
            let lambda = ctrl.scale();
            let g1 = b.gated(r1, &format!("{prefix}.zero.down1"), lambda);
            let g2 = b.gated(r2, &format!("{prefix}.zero.down2"), lambda);
            let g3 = b.gated(r3, &format!("{prefix}.zero.mid"), lambda);
            s1 = b.g.add(s1, g1);
            s2 = b.g.add(s2, g2);
            m = b.g.add(m, g3);
        }
    }

    let u = b.g.upsample2(m);
    let u = b.g.add(u, s2);
    let u = b.stage(u, "main.up2", &ctx, opts.temporal);
    let u = b.g.upsample2(u);
    let u = b.g.add(u, s1);
    let u = b.stage(u, "main.up1", &ctx, opts.temporal);
    let u = b.norm_act(u);
    Ok(b.conv(u, "main.conv_out"))
}

/// `eps_theta(X_t, C, p, t)` with every branch enabled. `key_frame` is
/// 0-based.
pub fn predict_noise(
    xt: &LatentVideo,
    stack: &ControlStack,
    prompt: &PromptEmbedding,
    t: usize,
    params: &ModelParams,
    key_frame: usize,
) -> Result<LatentVideo> {
    predict_noise_with(xt, stack, prompt, t, params, key_frame, ForwardOptions::default())
}

pub fn predict_noise_with(
    xt: &LatentVideo,
    stack: &ControlStack,
    prompt: &PromptEmbedding,
    t: usize,
    params: &ModelParams,
    key_frame: usize,
    opts: ForwardOptions,
) -> Result<LatentVideo> {
    let mut b = Binder::new(params, None);
    let out = forward_graph(&mut b, xt, stack, prompt, t, key_frame, opts)?;
    LatentVideo::from_channels_last(xt.shape(), b.g.value(out))
}

#[cfg(test)]
mod tests {
    use super::super::{attach_lora, Control, LoraTargets};
    use super::*;
    use crate::rng::normal_video;

    fn small() -> ModelConfig {
        ModelConfig {
            width: 8,
            text_dim: 6,
            ..ModelConfig::default()
        }
    }

    fn inputs(n: usize, seed: u64) -> (LatentVideo, ControlStack, PromptEmbedding) {
        let mut rng = seeded(seed);
        let x = normal_video(&mut rng, [n, 4, 8, 8]).unwrap();
        let c = normal_video(&mut rng, [n, 1, 8, 8]).unwrap();
        let stack = ControlStack::single(Control::new(c, 1.0).unwrap());
        (x, stack, PromptEmbedding::encode("a red car", 6, 8).unwrap())
    }

    fn max_diff(a: &LatentVideo, b: &LatentVideo) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn shape_contract() {
        let params = ModelParams::new(small(), 1).unwrap();
        for n in [1, 2, 8] {
            let (x, s, p) = inputs(n, n as u64);
            let out = predict_noise(&x, &s, &p, 500, &params, 0).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.is_finite());
        }
    }

    #[test]
    fn fresh_branches_contribute_nothing() {
        let params = ModelParams::new(small(), 2).unwrap();
        let (x, s, p) = inputs(3, 3);
        let full = predict_noise(&x, &s, &p, 300, &params, 0).unwrap();
        let bare = predict_noise_with(
            &x,
            &s,
            &p,
            300,
            &params,
            0,
            ForwardOptions {
                temporal: false,
                control: false,
            },
        )
        .unwrap();
        assert!(max_diff(&full, &bare) <= 1e-12);
        let off = predict_noise(&x, &s.disabled(), &p, 300, &params, 0).unwrap();
        assert!(max_diff(&full, &off) <= 1e-12);
    }

    #[test]
    fn identical_frames_give_identical_outputs() {
        let params = ModelParams::new(small(), 4).unwrap();
        let (x1, s1, p) = inputs(1, 5);
        let x = LatentVideo::broadcast_frame(x1.frame(0), 2, 4, 8, 8).unwrap();
        let c = LatentVideo::broadcast_frame(s1.controls()[0].condition().frame(0), 2, 1, 8, 8).unwrap();
        let s = ControlStack::single(Control::new(c, 1.0).unwrap());
        let out = predict_noise(&x, &s, &p, 700, &params, 0).unwrap();
        assert_eq!(out.frame(0), out.frame(1));
    }

    #[test]
    fn initialization_copies() {
        let params = ModelParams::new(small(), 5).unwrap();
        for stage in ["down1", "down2", "up2", "up1"] {
            let kf = params.attention(&format!("main.{stage}.attn.kf")).unwrap();
            let tp = params.attention(&format!("main.{stage}.attn.temporal")).unwrap();
            for (a, b) in kf.params().iter().zip(tp.params()) {
                assert_eq!(a.tensor, b.tensor);
            }
            assert!(params
                .get(&format!("main.{stage}.attn.temporal.gate"))
                .unwrap()
                .tensor
                .data()
                .iter()
                .all(|v| *v == 0.0));
        }
        assert!(params.get("main.mid.attn.temporal.wq").is_none());
        assert!(params.get("control0.down1.attn.temporal.wq").is_none());
        for stage in CONTROL_STAGES {
            let main = params.attention(&format!("main.{stage}.attn.kf")).unwrap();
            let ctrl = params.attention(&format!("control0.{stage}.attn.kf")).unwrap();
            assert_eq!(main.wo.tensor, ctrl.wo.tensor);
            assert_eq!(ctrl.wo.role, ParamRole::KeyFrameOutput(Branch::Control));
        }
        for p in params
            .iter()
            .filter(|p| matches!(p.role, ParamRole::ControlGate | ParamRole::TemporalGate))
        {
            assert!(p.tensor.data().iter().all(|v| *v == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn deterministic_construction() {
        assert_eq!(ModelParams::new(small(), 9).unwrap(), ModelParams::new(small(), 9).unwrap());
        assert_ne!(ModelParams::new(small(), 9).unwrap(), ModelParams::new(small(), 10).unwrap());
    }

    #[test]
    fn fresh_lora_is_bit_identical() {
        let params = ModelParams::new(small(), 6).unwrap();
        let adapted = attach_lora(&params, &LoraTargets::MainAttention, 2, 1.0, 3).unwrap();
        assert!(!adapted.lora_adapters().is_empty());
        let (x, s, p) = inputs(2, 7);
        let a = predict_noise(&x, &s, &p, 100, &params, 0).unwrap();
        let b = predict_noise(&x, &s, &p, 100, &adapted, 0).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert!(matches!(
            attach_lora(&params, &LoraTargets::MainAttention, 9, 1.0, 3),
            Err(Error::RankTooLarge { .. })
        ));
        assert!(matches!(
            attach_lora(&params, &LoraTargets::Names(vec!["nope".into()]), 1, 1.0, 3),
            Err(Error::UnknownParameter(_))
        ));
    }

    #[test]
    fn restore_round_trip() {
        let params = attach_lora(&ModelParams::new(small(), 6).unwrap(), &LoraTargets::MainAttention, 2, 0.5, 3).unwrap();
        let tensors = params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        let lora: Vec<_> = params.lora_adapters().iter().map(|l| (l.target.clone(), l.scale)).collect();
        let back = ModelParams::restore(*params.config(), tensors, &lora).unwrap();
        assert_eq!(back, params);
        let mut partial: Vec<_> = params.base_params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        partial.pop();
        assert!(ModelParams::restore(*params.config(), partial, &[]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = ModelParams::new(small(), 1).unwrap();
        let (x, s, p) = inputs(2, 1);
        assert!(predict_noise(&x, &s, &p, 10, &params, 2).is_err());
        let (x3, _, _) = inputs(3, 1);
        assert!(predict_noise(&x3, &s, &p, 10, &params, 0).is_err());
        let wrong = PromptEmbedding::encode("car", 5, 4).unwrap();
        assert!(predict_noise(&x, &s, &wrong, 10, &params, 0).is_err());
    }
}
