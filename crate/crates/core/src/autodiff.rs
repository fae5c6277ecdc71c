//! A small reverse-mode tape over dense `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Only nodes
//! that transitively depend on a `requires_grad` leaf receive gradients.
//!
//! Feature maps use the channels-last layout `[frames, height, width, channels]`
//! throughout; "rows" below means every axis except the last.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{axpy, dot, exp, sqrt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Linear(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Im2col(Var),
    AvgPool2(Var),
    Upsample2(Var),
    SwapAxes01(Var),
    SelectBatch(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        kv_index: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads[var.0].take()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    let rows = shape[..shape.len() - 1].iter().product();
    (rows, cols)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "leaf shape");
        self.push(value, shape.to_vec(), Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(value, shape, Op::Add(a, b), rg)
    }

    /// Adds a length-`C` vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        assert_eq!(self.value(b).len(), cols, "bias width");
        let bias = self.value(b);
        let value = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        self.push(value, shape, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).iter().map(|v| s * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape, Op::Scale(x, s), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape, Op::Silu(x), rg)
    }

    /// Parameter-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / sqrt(var + LN_EPS);
            for (o, v) in value[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape, Op::LayerNorm { x, inv_std }, rg)
    }

    /// `y = x W^T` with `x: [.., in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (rows, cin) = rows_cols(self.shape(x));
        let wshape = self.shape(w);
        assert_eq!(wshape.len(), 2, "linear weight rank");
        assert_eq!(wshape[1], cin, "linear input width");
        let cout = wshape[0];
        let xv = self.value(x);
        let wv = self.value(w);
        let mut value = vec![0.0; rows * cout];
        for r in 0..rows {
            let xr = &xv[r * cin..(r + 1) * cin];
            let out = &mut value[r * cout..(r + 1) * cout];
            for (o, slot) in out.iter_mut().enumerate() {
                *slot = dot(xr, &wv[o * cin..(o + 1) * cin]);
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[x, w]);
        self.push(value, shape, Op::Linear(x, w), rg)
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                axpy(av[i * k + p], &bv[p * n..(p + 1) * n], &mut value[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(value, vec![m, n], Op::MatMul(a, b), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(self.value(x).len(), shape.iter().product::<usize>(), "reshape size");
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(value, shape.to_vec(), Op::Reshape(x), rg)
    }

    /// 3x3 zero-padded patches: `[F, H, W, C] -> [F, H, W, C * 9]`, patch
    /// column `c * 9 + ky * 3 + kx`, matching an `[out, in, 3, 3]` kernel.
    pub fn im2col(&mut self, x: Var) -> Var {
        let [f, h, w, c] = dims4(self.shape(x));
        let xv = self.value(x);
        let mut value = vec![0.0; f * h * w * c * 9];
        for fi in 0..f {
            for y in 0..h {
                for xx in 0..w {
                    let dst = ((fi * h + y) * w + xx) * c * 9;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = ((fi * h + sy as usize) * w + sx as usize) * c;
                            for ch in 0..c {
                                value[dst + ch * 9 + ky * 3 + kx] = xv[src + ch];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, vec![f, h, w, c * 9], Op::Im2col(x), rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [f, h, w, c] = dims4(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut value = vec![0.0; f * ho * wo * c];
        for fi in 0..f {
            for y in 0..ho {
                for xx in 0..wo {
                    let dst = ((fi * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((fi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        axpy(0.25, &xv[src..src + c], &mut value[dst..dst + c]);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, vec![f, ho, wo, c], Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [f, h, w, c] = dims4(self.shape(x));
        let (ho, wo) = (h * 2, w * 2);
        let xv = self.value(x);
        let mut value = vec![0.0; f * ho * wo * c];
        for fi in 0..f {
            for y in 0..ho {
                for xx in 0..wo {
                    let src = ((fi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((fi * ho + y) * wo + xx) * c;
                    value[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, vec![f, ho, wo, c], Op::Upsample2(x), rg)
    }

    /// `[A, B, C] -> [B, A, C]`.
    pub fn swap_axes01(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "swap_axes01 rank");
        let (a, b, c) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for i in 0..a {
            for j in 0..b {
                value[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(&xv[(i * b + j) * c..(i * b + j + 1) * c]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, vec![b, a, c], Op::SwapAxes01(x), rg)
    }

    /// Slice `index` of axis 0, keeping the axis with length 1.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Var {
        let shape = self.shape(x);
        assert!(index < shape[0], "select_batch index");
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = 1;
        let value = self.value(x)[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(&[x]);
        self.push(value, out_shape, Op::SelectBatch(x, index), rg)
    }

    /// Scaled dot-product attention, batch `b` of the queries attending to
    /// batch `kv_index[b]` of the keys and values.
    ///
    /// `q: [B, Sq, dk]`, `k: [Bk, Sk, dk]`, `v: [Bk, Sk, dv]`; output `[B, Sq, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, kv_index: Vec<usize>) -> Var {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        assert!(qs.len() == 3 && ks.len() == 3 && vs.len() == 3, "attention rank");
        let (b, sq, dk) = (qs[0], qs[1], qs[2]);
        let (bk, sk, dv) = (ks[0], ks[1], vs[2]);
        assert_eq!(ks[2], dk, "attention key width");
        assert_eq!((vs[0], vs[1]), (bk, sk), "attention value shape");
        assert_eq!(kv_index.len(), b, "attention kv index length");
        assert!(kv_index.iter().all(|&i| i < bk), "attention kv index range");
        let scale = 1.0 / sqrt(dk as f64);
        let (qv, kvv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; b * sq * sk];
        let mut value = vec![0.0; b * sq * dv];
        for bi in 0..b {
            let kb = kv_index[bi];
            for i in 0..sq {
                let qrow = &qv[(bi * sq + i) * dk..(bi * sq + i + 1) * dk];
                let p = &mut probs[(bi * sq + i) * sk..(bi * sq + i + 1) * sk];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qrow, &kvv[(kb * sk + j) * dk..(kb * sk + j + 1) * dk]) * scale;
                    max = max.max(*pj);
                }
                let mut sum = 0.0;
                for pj in p.iter_mut() {
                    *pj = exp(*pj - max);
                    sum += *pj;
                }
                let out = &mut value[(bi * sq + i) * dv..(bi * sq + i + 1) * dv];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= sum;
                    axpy(*pj, &vv[(kb * sk + j) * dv..(kb * sk + j + 1) * dv], out);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(value, vec![b, sq, dv], Op::Attention { q, k, v, kv_index, probs }, rg)
    }

    /// Mean squared error against a constant target; a scalar node.
    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Var {
        assert_eq!(self.value(pred).len(), target.len(), "mse length");
        let n = target.len() as f64;
        let sum: f64 = self.value(pred).iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum();
        let rg = self.rg(&[pred]);
        self.push(vec![sum / n], vec![1], Op::Mse { pred, target }, rg)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = acc!(*x) {
                    axpy(1.0, g, gx);
                }
                if let Some(gb) = acc!(*b) {
                    let cols = gb.len();
                    for row in g.chunks_exact(cols) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc!(*x) {
                    axpy(*s, g, gx);
                }
            }
            Op::Silu(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((gi, &xi), &go) in gx.iter_mut().zip(&nodes[x.0].value).zip(g) {
                        let s = sigmoid(xi);
                        *gi += go * s * (1.0 + xi * (1.0 - s));
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(gx) = acc!(*x) {
                    let cols = *node.shape.last().unwrap();
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let y = &node.value[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = dot(gr, y) / cols as f64;
                        for ((o, &gi), &yi) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(y) {
                            *o += inv * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
            }
            Op::Linear(x, w) => {
                let (rows, cin) = rows_cols(&nodes[x.0].shape);
                let cout = nodes[w.0].shape[0];
                if let Some(gx) = acc!(*x) {
                    let wv = &nodes[w.0].value;
                    for r in 0..rows {
                        let gxr = &mut gx[r * cin..(r + 1) * cin];
                        for o in 0..cout {
                            let go = g[r * cout + o];
                            if go != 0.0 {
                                axpy(go, &wv[o * cin..(o + 1) * cin], gxr);
                            }
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    let xv = &nodes[x.0].value;
                    for r in 0..rows {
                        let xr = &xv[r * cin..(r + 1) * cin];
                        for o in 0..cout {
                            let go = g[r * cout + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut gw[o * cin..(o + 1) * cin]);
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = acc!(*a) {
                    let bv = &nodes[b.0].value;
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    let av = &nodes[a.0].value;
                    for i in 0..m {
                        for p in 0..k {
                            axpy(av[i * k + p], &g[i * n..(i + 1) * n], &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    axpy(1.0, g, gx);
                }
            }
            Op::Im2col(x) => {
                if let Some(gx) = acc!(*x) {
                    let [f, h, w, c] = dims4(&nodes[x.0].shape);
                    for fi in 0..f {
                        for y in 0..h {
                            for xx in 0..w {
                                let src = ((fi * h + y) * w + xx) * c * 9;
                                for ky in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let dst = ((fi * h + sy as usize) * w + sx as usize) * c;
                                        for ch in 0..c {
                                            gx[dst + ch] += g[src + ch * 9 + ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                if let Some(gx) = acc!(*x) {
                    let [f, h, w, c] = dims4(&nodes[x.0].shape);
                    let (ho, wo) = (h / 2, w / 2);
                    for fi in 0..f {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let src = ((fi * ho + y) * wo + xx) * c;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let dst = ((fi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                                    axpy(0.25, &g[src..src + c], &mut gx[dst..dst + c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                if let Some(gx) = acc!(*x) {
                    let [f, h, w, c] = dims4(&nodes[x.0].shape);
                    let (ho, wo) = (h * 2, w * 2);
                    for fi in 0..f {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let src = ((fi * ho + y) * wo + xx) * c;
                                let dst = ((fi * h + y / 2) * w + xx / 2) * c;
                                axpy(1.0, &g[src..src + c], &mut gx[dst..dst + c]);
                            }
                        }
                    }
                }
            }
            Op::SwapAxes01(x) => {
                if let Some(gx) = acc!(*x) {
                    let s = &nodes[x.0].shape;
                    let (a, b, c) = (s[0], s[1], s[2]);
                    for i in 0..a {
                        for j in 0..b {
                            axpy(
                                1.0,
                                &g[(j * a + i) * c..(j * a + i + 1) * c],
                                &mut gx[(i * b + j) * c..(i * b + j + 1) * c],
                            );
                        }
                    }
                }
            }
            Op::SelectBatch(x, index) => {
                if let Some(gx) = acc!(*x) {
                    let inner = g.len();
                    axpy(1.0, g, &mut gx[index * inner..(index + 1) * inner]);
                }
            }
            Op::Attention { q, k, v, kv_index, probs } => {
                let qs = &nodes[q.0].shape;
                let (b, sq, dk) = (qs[0], qs[1], qs[2]);
                let sk = nodes[k.0].shape[1];
                let dv = nodes[v.0].shape[2];
                let scale = 1.0 / sqrt(dk as f64);
                let (qv, kvv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                // dS for every (b, i, j), shared by the q and k gradients.
                let mut ds = vec![0.0; b * sq * sk];
                let mut dp = vec![0.0; sk];
                for bi in 0..b {
                    let kb = kv_index[bi];
                    for i in 0..sq {
                        let go = &g[(bi * sq + i) * dv..(bi * sq + i + 1) * dv];
                        let p = &probs[(bi * sq + i) * sk..(bi * sq + i + 1) * sk];
                        for (j, dpj) in dp.iter_mut().enumerate() {
                            *dpj = dot(go, &vv[(kb * sk + j) * dv..(kb * sk + j + 1) * dv]);
                        }
                        let inner = dot(&dp, p);
                        for j in 0..sk {
                            ds[(bi * sq + i) * sk + j] = p[j] * (dp[j] - inner);
                        }
                    }
                }
                if let Some(gv) = acc!(*v) {
                    for bi in 0..b {
                        let kb = kv_index[bi];
                        for i in 0..sq {
                            let go = &g[(bi * sq + i) * dv..(bi * sq + i + 1) * dv];
                            for j in 0..sk {
                                let pj = probs[(bi * sq + i) * sk + j];
                                axpy(pj, go, &mut gv[(kb * sk + j) * dv..(kb * sk + j + 1) * dv]);
                            }
                        }
                    }
                }
                if let Some(gq) = acc!(*q) {
                    for bi in 0..b {
                        let kb = kv_index[bi];
                        for i in 0..sq {
                            let gqr = &mut gq[(bi * sq + i) * dk..(bi * sq + i + 1) * dk];
                            for j in 0..sk {
                                let d = ds[(bi * sq + i) * sk + j] * scale;
                                axpy(d, &kvv[(kb * sk + j) * dk..(kb * sk + j + 1) * dk], gqr);
                            }
                        }
                    }
                }
                if let Some(gk) = acc!(*k) {
                    for bi in 0..b {
                        let kb = kv_index[bi];
                        for i in 0..sq {
                            let qr = &qv[(bi * sq + i) * dk..(bi * sq + i + 1) * dk];
                            for j in 0..sk {
                                let d = ds[(bi * sq + i) * sk + j] * scale;
                                axpy(d, qr, &mut gk[(kb * sk + j) * dk..(kb * sk + j + 1) * dk]);
                            }
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if let Some(gp) = acc!(*pred) {
                    let n = target.len() as f64;
                    let scale = 2.0 * g[0] / n;
                    for ((o, p), t) in gp.iter_mut().zip(&nodes[pred.0].value).zip(target) {
                        *o += scale * (p - t);
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected a [F, H, W, C] feature map");
    [shape[0], shape[1], shape[2], shape[3]]
}
