use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{Param, ParamRole};
use crate::autodiff::{Graph, Var};
use crate::math::sqrt;
use crate::rng::standard_normal;
use crate::{Error, Result, Tensor};

/// Hidden features `[frames, sites, width]`: one `width`-vector per frame
/// and spatial site.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    frames: usize,
    sites: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(frames: usize, sites: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames * sites * width != data.len() || frames == 0 || sites == 0 || width == 0 {
            return Err(Error::invalid(
                "feature map",
                format!("{} values for [{frames}, {sites}, {width}]", data.len()),
            ));
        }
        Ok(FeatureMap { frames, sites, width, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.sites, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.sites * self.width;
        &self.data[i * n..(i + 1) * n]
    }
}

/// Projection matrices of one attention site, each `width x width`
/// (`[out, in]`, applied as `x W^T`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
}

impl AttentionWeights {
    /// Random projections scaled by `1/sqrt(width)`, named `<prefix>.wq` etc.
    pub fn random(prefix: &str, width: usize, out_role: ParamRole, rng: &mut impl Rng) -> Self {
        let mut mat = |suffix: &str, role: ParamRole| {
            let data = standard_normal(rng, width * width).into_iter().map(|v| v / sqrt(width as f64)).collect();
            Param::new(
                format!("{prefix}.{suffix}"),
                role,
                Tensor::from_vec(&[width, width], data).expect("square"),
            )
        };
        AttentionWeights {
            wq: mat("wq", ParamRole::Base),
            wk: mat("wk", ParamRole::Base),
            wv: mat("wv", ParamRole::Base),
            wo: mat("wo", out_role),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.tensor.shape()[1]
    }

    fn check(&self, v: &FeatureMap) -> Result<()> {
        for p in [&self.wq, &self.wk, &self.wv, &self.wo] {
            let s = p.tensor.shape();
            if s.len() != 2 || s[0] != s[1] || s[1] != v.width {
                return Err(Error::shape("attention weights", &[v.width, v.width], s));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> [&Param; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

/// Graph handles for the four projections of one site.
pub(crate) struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Every frame's queries against the keys and values of frame `key`.
/// `x: [F, S, d]`.
pub(crate) fn key_frame_graph(g: &mut Graph, x: Var, w: &AttnVars, key: usize) -> Var {
    let frames = g.shape(x)[0];
    let q = g.linear(x, w.wq);
    let xk = g.select_batch(x, key);
    let k = g.linear(xk, w.wk);
    let v = g.linear(xk, w.wv);
    let a = g.attention(q, k, v, alloc::vec![0; frames]);
    g.linear(a, w.wo)
}

/// Per-frame spatial self-attention. `x: [F, S, d]`.
pub(crate) fn self_attention_graph(g: &mut Graph, x: Var, w: &AttnVars) -> Var {
    let frames = g.shape(x)[0];
    let q = g.linear(x, w.wq);
    let k = g.linear(x, w.wk);
    let v = g.linear(x, w.wv);
    let a = g.attention(q, k, v, (0..frames).collect());
    g.linear(a, w.wo)
}

/// Gated attention across frames at each site, without the residual.
/// `x: [F, S, d]`.
pub(crate) fn temporal_delta_graph(g: &mut Graph, x: Var, w: &AttnVars, gate: Var) -> Var {
    let by_site = g.swap_axes01(x);
    let sites = g.shape(by_site)[0];
    let q = g.linear(by_site, w.wq);
    let k = g.linear(by_site, w.wk);
    let v = g.linear(by_site, w.wv);
    let a = g.attention(q, k, v, (0..sites).collect());
    let o = g.linear(a, w.wo);
    let back = g.swap_axes01(o);
    g.linear(back, gate)
}

fn bind(g: &mut Graph, w: &AttentionWeights) -> AttnVars {
    let mut leaf = |p: &Param| g.leaf(p.tensor.data().to_vec(), p.tensor.shape(), false);
    AttnVars {
        wq: leaf(&w.wq),
        wk: leaf(&w.wk),
        wv: leaf(&w.wv),
        wo: leaf(&w.wo),
    }
}

fn feature_leaf(g: &mut Graph, v: &FeatureMap) -> Var {
    g.leaf(v.data.clone(), &v.shape(), false)
}

fn into_feature(g: &Graph, out: Var) -> FeatureMap {
    let s = g.shape(out);
    FeatureMap::new(s[0], s[1], s[2], g.value(out).to_vec()).expect("graph shape")
}

/// Standard per-frame self-attention: `softmax(Q K^T / sqrt(d)) V W_O^T`
/// with `Q`, `K`, `V` all projected from the same frame.
pub fn self_attention(v: &FeatureMap, w: &AttentionWeights) -> Result<FeatureMap> {
    w.check(v)?;
    let mut g = Graph::new();
    let x = feature_leaf(&mut g, v);
    let vars = bind(&mut g, w);
    let out = self_attention_graph(&mut g, x, &vars);
    Ok(into_feature(&g, out))
}

/// Key-frame attention: queries from each frame, keys and values from frame
/// `key_frame` (0-based).
pub fn key_frame_attention(v: &FeatureMap, w: &AttentionWeights, key_frame: usize) -> Result<FeatureMap> {
    w.check(v)?;
    if key_frame >= v.frames {
        return Err(Error::IndexOutOfRange {
            what: "key frame",
            index: key_frame,
            len: v.frames,
        });
    }
    let mut g = Graph::new();
    let x = feature_leaf(&mut g, v);
    let vars = bind(&mut g, w);
    let out = key_frame_graph(&mut g, x, &vars, key_frame);
    Ok(into_feature(&g, out))
}

/// Temporal attention as a residual branch: `v + gate(attn_frames(v))`,
/// attending across frames independently at every site.
pub fn temporal_attention(v: &FeatureMap, w: &AttentionWeights, gate: &Param) -> Result<FeatureMap> {
    w.check(v)?;
    if gate.tensor.shape() != [v.width, v.width] {
        return Err(Error::shape("temporal gate", &[v.width, v.width], gate.tensor.shape()));
    }
    let mut g = Graph::new();
    let x = feature_leaf(&mut g, v);
    let vars = bind(&mut g, w);
    let gv = g.leaf(gate.tensor.data().to_vec(), gate.tensor.shape(), false);
    let delta = temporal_delta_graph(&mut g, x, &vars, gv);
    let out = g.add(x, delta);
    Ok(into_feature(&g, out))
}

/// A zero `width x width` gate for [`temporal_attention`].
pub fn zero_gate(name: &str, width: usize) -> Param {
    Param::new(String::from(name), ParamRole::TemporalGate, Tensor::zeros(&[width, width]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;
    use alloc::vec::Vec;

    fn weights(width: usize, seed: u64) -> AttentionWeights {
        AttentionWeights::random("t", width, ParamRole::Base, &mut seeded(seed))
    }

    fn features(frames: usize, sites: usize, width: usize, seed: u64) -> FeatureMap {
        let data = standard_normal(&mut seeded(seed), frames * sites * width);
        FeatureMap::new(frames, sites, width, data).unwrap()
    }

    fn mat(p: &Param) -> Vec<Vec<f64>> {
        let n = p.tensor.shape()[0];
        (0..n).map(|r| (0..n).map(|c| p.tensor.at2(r, c)).collect()).collect()
    }

    /// `W x` for a row-major matrix given as nested rows.
    fn apply(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// Dense textbook attention for one query against explicit key/value rows.
    fn oracle_attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
        let d = q.len() as f64;
        let scores: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; values[0].len()];
        for (ei, v) in e.iter().zip(values) {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += ei / z * vi;
            }
        }
        out
    }

    fn token(v: &FeatureMap, f: usize, s: usize) -> Vec<f64> {
        let d = v.width();
        v.frame(f)[s * d..(s + 1) * d].to_vec()
    }

    fn hand_weights() -> AttentionWeights {
        let mut w = weights(2, 0);
        let set = |p: &mut Param, vals: [f64; 4]| p.tensor = Tensor::from_vec(&[2, 2], vals.to_vec()).unwrap();
        set(&mut w.wq, [1.0, 0.5, -0.3, 0.8]);
        set(&mut w.wk, [0.2, -1.0, 0.7, 0.4]);
        set(&mut w.wv, [1.5, 0.0, 0.3, -0.6]);
        set(&mut w.wo, [0.9, 0.1, -0.2, 1.1]);
        w
    }

    #[test]
    fn singleton_softmax_reduces_to_value_path() {
        let w = weights(4, 1);
        let v = features(2, 1, 4, 2);
        let out = self_attention(&v, &w).unwrap();
        for f in 0..2 {
            let expect = apply(&mat(&w.wo), &apply(&mat(&w.wv), &token(&v, f, 0)));
            for (a, b) in out.frame(f).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut w = weights(4, 1);
        w.wo.tensor = Tensor::zeros(&[4, 4]);
        let out = self_attention(&features(3, 5, 4, 7), &w).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn self_attention_matches_dense_oracle() {
        let w = hand_weights();
        let v = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let out = self_attention(&v, &w).unwrap();
        let (wq, wk, wv, wo) = (mat(&w.wq), mat(&w.wk), mat(&w.wv), mat(&w.wo));
        let toks = [token(&v, 0, 0), token(&v, 0, 1)];
        let keys: Vec<_> = toks.iter().map(|t| apply(&wk, t)).collect();
        let vals: Vec<_> = toks.iter().map(|t| apply(&wv, t)).collect();
        for (s, t) in toks.iter().enumerate() {
            let expect = apply(&wo, &oracle_attend(&apply(&wq, t), &keys, &vals));
            for (a, b) in token(&out, 0, s).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn key_frame_matches_substitution_oracle() {
        let w = hand_weights();
        let v = FeatureMap::new(2, 2, 2, vec![1.0, 2.0, -0.5, 0.25, 0.3, -1.2, 2.0, 0.7]).unwrap();
        let out = key_frame_attention(&v, &w, 0).unwrap();
        let (wq, wk, wv, wo) = (mat(&w.wq), mat(&w.wk), mat(&w.wv), mat(&w.wo));
        // Frame 2's keys and values are frame 1's tokens.
        let key_toks = [token(&v, 0, 0), token(&v, 0, 1)];
        let keys: Vec<_> = key_toks.iter().map(|t| apply(&wk, t)).collect();
        let vals: Vec<_> = key_toks.iter().map(|t| apply(&wv, t)).collect();
        for s in 0..2 {
            let q = apply(&wq, &token(&v, 1, s));
            let expect = apply(&wo, &oracle_attend(&q, &keys, &vals));
            for (a, b) in token(&out, 1, s).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_frame_single_frame_is_self_attention_bitwise() {
        let w = weights(6, 3);
        let v = features(1, 9, 6, 4);
        let a = key_frame_attention(&v, &w, 0).unwrap();
        let b = self_attention(&v, &w).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn key_frame_equal_frames_equal_outputs() {
        let w = weights(4, 5);
        let one = features(1, 3, 4, 6);
        let data: Vec<f64> = (0..4).flat_map(|_| one.data().to_vec()).collect();
        let v = FeatureMap::new(4, 3, 4, data).unwrap();
        let out = key_frame_attention(&v, &w, 2).unwrap();
        for f in 1..4 {
            assert_eq!(out.frame(f), out.frame(0));
        }
    }

    #[test]
    fn key_frame_out_of_range() {
        let w = weights(4, 5);
        let v = features(2, 3, 4, 6);
        assert!(matches!(key_frame_attention(&v, &w, 2), Err(Error::IndexOutOfRange { .. })));
        let narrow = features(2, 3, 3, 6);
        assert!(matches!(self_attention(&narrow, &w), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn key_frame_is_equivariant_to_non_key_permutation() {
        let w = weights(4, 8);
        let v = features(4, 3, 4, 9);
        let perm = [0usize, 3, 1, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&f| v.frame(f).to_vec()).collect();
        let vp = FeatureMap::new(4, 3, 4, permuted).unwrap();
        let a = key_frame_attention(&v, &w, 0).unwrap();
        let b = key_frame_attention(&vp, &w, 0).unwrap();
        for (i, &f) in perm.iter().enumerate() {
            assert_eq!(b.frame(i), a.frame(f));
        }
    }

    #[test]
    fn temporal_zero_gate_is_identity() {
        let w = weights(4, 10);
        let v = features(3, 5, 4, 11);
        let gate = zero_gate("g", 4);
        let out = temporal_attention(&v, &w, &gate).unwrap();
        assert!(out.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn temporal_single_frame_uses_value_path() {
        let w = weights(4, 12);
        let v = features(1, 2, 4, 13);
        let mut gate = zero_gate("g", 4);
        gate.tensor = Tensor::from_vec(&[4, 4], standard_normal(&mut seeded(14), 16)).unwrap();
        let out = temporal_attention(&v, &w, &gate).unwrap();
        let gm = mat(&gate);
        for s in 0..2 {
            let x = token(&v, 0, s);
            let branch = apply(&gm, &apply(&mat(&w.wo), &apply(&mat(&w.wv), &x)));
            for ((a, b), c) in token(&out, 0, s).iter().zip(&x).zip(&branch) {
                assert!((a - (b + c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_identity_gate_matches_dense_oracle() {
        let w = hand_weights();
        let v = FeatureMap::new(3, 2, 2, vec![1.0, 2.0, -0.5, 0.25, 0.3, -1.2, 2.0, 0.7, -0.9, 0.4, 1.3, -0.2]).unwrap();
        let mut gate = zero_gate("g", 2);
        gate.tensor = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = temporal_attention(&v, &w, &gate).unwrap();
        let (wq, wk, wv, wo) = (mat(&w.wq), mat(&w.wk), mat(&w.wv), mat(&w.wo));
        for s in 0..2 {
            let seq: Vec<_> = (0..3).map(|f| token(&v, f, s)).collect();
            let keys: Vec<_> = seq.iter().map(|t| apply(&wk, t)).collect();
            let vals: Vec<_> = seq.iter().map(|t| apply(&wv, t)).collect();
            for (f, q) in seq.iter().enumerate() {
                let att = apply(&wo, &oracle_attend(&apply(&wq, q), &keys, &vals));
                for ((a, x), b) in token(&out, f, s).iter().zip(q).zip(&att) {
                    assert!((a - (x + b)).abs() < 1e-12);
                }
            }
        }
    }
}
