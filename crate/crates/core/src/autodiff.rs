//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards is a valid
//! topological order for the backward pass. Parameters live outside the
//! graph in a [`ParamStore`] and are borrowed read-only, which lets several
//! graphs (one per utterance) run concurrently against the same weights.

use std::borrow::Cow;

use crate::fsq::FsqLattice;
use crate::nn::ParamStore;
use crate::tensor::{gemm, gemm_raw, Tensor};

pub type ParamId = usize;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Tanh,
    Elu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
}

impl Unary {
    fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which key positions each query row may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Query row `i` sits at absolute position `q_offset + i` and sees keys
    /// `0..=q_offset + i`.
    Causal { q_offset: usize },
    /// Rows are grouped into independent blocks of `size`; full attention
    /// inside a block, none across.
    Blocks { size: usize },
    /// Rows are packed independent sequences of the given lengths, each
    /// causal within itself.
    CausalSegments(Vec<usize>),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Unary(Var, Unary),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        // one probability matrix per (block, head), kept for backward
        probs: Vec<Tensor>,
    },
    Rope {
        x: Var,
        heads: usize,
        positions: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRows {
        x: Var,
        times: usize,
    },
    TileRows {
        x: Var,
        times: usize,
    },
    MeanBlocks {
        x: Var,
        size: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    SumAll(Var),
    Quantize(Var),
    BceLogitsSum {
        x: Var,
        targets: Vec<f32>,
        weights: Vec<f32>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Forward tape.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            grad_enabled: true,
        }
    }

    /// Inference-only graph: no backward bookkeeping is kept.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient can be read back from [`Gradients::of`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.tensor(id)),
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x + b` with `b` (1×c) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), xv.cols(), "bias width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.apply(v));
        self.push(out, Op::Unary(x, f), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu)
    }

    /// Root-mean-square normalisation per row with a learned gain (1×c).
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Var {
        let (xv, gv) = (self.value(x), self.value(gain));
        assert_eq!(gv.shape(), (1, xv.cols()), "rms gain shape mismatch");
        let c = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), c);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f32>() / c as f32;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms.push(ir);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gv.data()) {
                *o = v * ir * g;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Multi-head scaled dot-product attention. `q` is `rq × d`, `k` and `v`
    /// are `rk × d`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(
            heads > 0 && d % heads == 0,
            "model width {d} not divisible by {heads} heads"
        );
        assert_eq!(kv.shape(), vv.shape(), "key/value shape mismatch");
        assert_eq!(kv.cols(), d, "key width mismatch");
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::new();
        let keep = self.grad_enabled;

        for (q0, qn, k0, kn, causal_offset) in attention_blocks(qv.rows(), kv.rows(), &mask) {
            for h in 0..heads {
                let mut s = Tensor::zeros(qn, kn);
                gemm_raw(
                    qn,
                    hd,
                    kn,
                    scale,
                    &qv.data()[q0 * d + h * hd..],
                    d as isize,
                    1,
                    &kv.data()[k0 * d + h * hd..],
                    1,
                    d as isize,
                    0.0,
                    s.data_mut(),
                    kn as isize,
                    1,
                );
                softmax_rows_masked(&mut s, causal_offset);
                gemm_raw(
                    qn,
                    kn,
                    hd,
                    1.0,
                    s.data(),
                    kn as isize,
                    1,
                    &vv.data()[k0 * d + h * hd..],
                    d as isize,
                    1,
                    0.0,
                    &mut out.data_mut()[q0 * d + h * hd..],
                    d as isize,
                    1,
                );
                if keep {
                    probs.push(s);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Rotary position encoding applied within each head; row `r` is at
    /// absolute position `offset + r`.
    pub fn rope(&mut self, x: Var, heads: usize, offset: usize) -> Var {
        let positions = (offset..offset + self.shape(x).0).collect();
        self.rope_at(x, heads, positions)
    }

    /// Rotary encoding with an explicit position per row.
    pub fn rope_at(&mut self, x: Var, heads: usize, positions: Vec<usize>) -> Var {
        assert_eq!(positions.len(), self.shape(x).0, "rope: one position per row");
        let mut out = self.value(x).clone();
        rope_apply(&mut out, heads, &positions, false);
        self.push(out, Op::Rope { x, heads, positions }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&vals);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_cols(&vals);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * times);
        for r in 0..xv.rows() {
            for _ in 0..times {
                data.extend_from_slice(xv.row(r));
            }
        }
        let out = Tensor::from_vec(xv.rows() * times, xv.cols(), data);
        self.push(out, Op::RepeatRows { x, times }, &[x])
    }

    /// Whole matrix stacked `times` times.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::from_vec(xv.rows() * times, xv.cols(), data);
        self.push(out, Op::TileRows { x, times }, &[x])
    }

    /// Mean over consecutive groups of `size` rows.
    pub fn mean_blocks(&mut self, x: Var, size: usize) -> Var {
        let xv = self.value(x);
        assert!(
            size > 0 && xv.rows().is_multiple_of(size),
            "mean_blocks: rows not divisible by block"
        );
        let nb = xv.rows() / size;
        let mut out = Tensor::zeros(nb, xv.cols());
        for b in 0..nb {
            let o = out.row_mut(b);
            for r in 0..size {
                for (acc, &v) in o.iter_mut().zip(xv.row(b * size + r)) {
                    *acc += v;
                }
            }
            for acc in o.iter_mut() {
                *acc /= size as f32;
            }
        }
        self.push(out, Op::MeanBlocks { x, size }, &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshape(rows, cols);
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(ids.len() * xv.cols());
        for &i in ids {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(ids.len(), xv.cols(), data);
        self.push(out, Op::GatherRows { x, ids: ids.to_vec() }, &[x])
    }

    /// Unfolds a `T × C` signal into `T_out × (kernel·C)` windows for a
    /// strided convolution with `pad_left` zeros in front.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad_left: usize) -> Var {
        let out = im2col_forward(self.value(x), kernel, stride, pad_left);
        self.push(
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad_left,
            },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Lattice quantisation with a straight-through backward pass.
    pub fn quantize(&mut self, x: Var, lattice: &FsqLattice) -> Var {
        let out = self.value(x).map(|v| lattice.quantize_scalar(v));
        self.push(out, Op::Quantize(x), &[x])
    }

    /// `Σ w_i · BCE(sigmoid(x_i), y_i)` over all elements, computed stably.
    pub fn bce_logits_sum(&mut self, x: Var, targets: &[f32], weights: &[f32]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), targets.len(), "bce target count mismatch");
        assert_eq!(xv.len(), weights.len(), "bce weight count mismatch");
        let s: f32 = xv
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&l, &y), &w)| w * (l.max(0.0) - l * y + (-l.abs()).exp().ln_1p()))
            .sum();
        self.push(
            Tensor::scalar(s),
            Op::BceLogitsSum {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[x],
        )
    }

    /// Runs the backward pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(id) = node.op {
                accumulate(&mut param_grads[id], g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: ParamGrads { grads: param_grads },
        }
    }

    fn backward_node(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(_) => unreachable!("parameter gradients are moved out before dispatch"),
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let mut da = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(g, false, val(*b), true, &mut da, 1.0, 0.0);
                    accumulate(&mut grads[a.0], da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(val(*a), true, g, false, &mut db, 1.0, 0.0);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], col_sums(g));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                accumulate(&mut grads[x.0], g.map(|v| v * k));
            }
            Op::AddScalar(x) => accumulate(&mut grads[x.0], g.clone()),
            Op::Unary(x, f) => {
                let xv = val(*x);
                let y = &node.value;
                let mut dx = g.clone();
                for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                    *d *= f.derivative(xi, yi);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let gv = val(*gain);
                let c = xv.cols();
                if needs(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), c);
                    for r in 0..xv.rows() {
                        let ir = inv_rms[r];
                        let (xr, gr) = (xv.row(r), g.row(r));
                        let dot: f32 = (0..c).map(|j| gv.data()[j] * gr[j] * xr[j]).sum();
                        let coef = ir * ir * ir * dot / c as f32;
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = ir * gv.data()[j] * gr[j] - coef * xr[j];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*gain) {
                    let mut dg = Tensor::zeros(1, c);
                    for r in 0..xv.rows() {
                        let ir = inv_rms[r];
                        for ((d, &xr), &gr) in dg.data_mut().iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                            *d += gr * xr * ir;
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Tensor::zeros(y.rows(), c);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f32>() / c as f32;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols();
                let hd = d / heads;
                let scale = 1.0 / (hd as f32).sqrt();
                let mut dq = Tensor::zeros(qv.rows(), d);
                let mut dk = Tensor::zeros(kv.rows(), d);
                let mut dv = Tensor::zeros(vv.rows(), d);
                let mut pi = 0;
                for (q0, qn, k0, kn, _) in attention_blocks(qv.rows(), kv.rows(), mask) {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let go = q0 * d + h * hd;
                        let ko = k0 * d + h * hd;
                        // dV = Pᵀ · dO
                        gemm_raw(
                            kn,
                            qn,
                            hd,
                            1.0,
                            p.data(),
                            1,
                            kn as isize,
                            &g.data()[go..],
                            d as isize,
                            1,
                            1.0,
                            &mut dv.data_mut()[ko..],
                            d as isize,
                            1,
                        );
                        // dP = dO · Vᵀ
                        let mut dp = Tensor::zeros(qn, kn);
                        gemm_raw(
                            qn,
                            hd,
                            kn,
                            1.0,
                            &g.data()[go..],
                            d as isize,
                            1,
                            &vv.data()[ko..],
                            1,
                            d as isize,
                            0.0,
                            dp.data_mut(),
                            kn as isize,
                            1,
                        );
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                        for r in 0..qn {
                            let pr = p.row(r);
                            let dpr = dp.row_mut(r);
                            let dot: f32 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                            for (x, &pp) in dpr.iter_mut().zip(pr) {
                                *x = pp * (*x - dot) * scale;
                            }
                        }
                        // dQ = dS · K
                        gemm_raw(
                            qn,
                            kn,
                            hd,
                            1.0,
                            dp.data(),
                            kn as isize,
                            1,
                            &kv.data()[ko..],
                            d as isize,
                            1,
                            1.0,
                            &mut dq.data_mut()[go..],
                            d as isize,
                            1,
                        );
                        // dK = dSᵀ · Q
                        gemm_raw(
                            kn,
                            qn,
                            hd,
                            1.0,
                            dp.data(),
                            1,
                            kn as isize,
                            &qv.data()[go..],
                            d as isize,
                            1,
                            1.0,
                            &mut dk.data_mut()[ko..],
                            d as isize,
                            1,
                        );
                    }
                }
                if needs(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if needs(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if needs(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::Rope { x, heads, positions } => {
                let mut dx = g.clone();
                rope_apply(&mut dx, *heads, positions, true);
                accumulate(&mut grads[x.0], dx);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(&mut grads[x.0], dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let n = val(*p).rows();
                    if needs(*p) {
                        accumulate(&mut grads[p.0], g.slice_rows(row, n));
                    }
                    row += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let n = val(*p).cols();
                    if needs(*p) {
                        accumulate(&mut grads[p.0], g.slice_cols(col, n));
                    }
                    col += n;
                }
            }
            Op::RepeatRows { x, times } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let d = dx.row_mut(r);
                    for t in 0..*times {
                        for (a, &b) in d.iter_mut().zip(g.row(r * times + t)) {
                            *a += b;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::TileRows { x, times } => {
                let xv = val(*x);
                let n = xv.rows();
                let mut dx = Tensor::zeros(n, xv.cols());
                for t in 0..*times {
                    for r in 0..n {
                        let src = g.row(t * n + r);
                        for (a, &b) in dx.row_mut(r).iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::MeanBlocks { x, size } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let inv = 1.0 / *size as f32;
                for r in 0..xv.rows() {
                    for (a, &b) in dx.row_mut(r).iter_mut().zip(g.row(r / size)) {
                        *a = b * inv;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                accumulate(&mut grads[x.0], g.clone().reshape(r, c));
            }
            Op::GatherRows { x, ids } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (a, &b) in dx.row_mut(id).iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad_left,
            } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), c);
                for t in 0..g.rows() {
                    let gr = g.row(t);
                    for j in 0..*kernel {
                        let p = (t * stride + j) as isize - *pad_left as isize;
                        if p < 0 || p as usize >= xv.rows() {
                            continue;
                        }
                        for (a, &b) in dx.row_mut(p as usize).iter_mut().zip(&gr[j * c..(j + 1) * c]) {
                            *a += b;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SumAll(x) => {
                let (r, c) = val(*x).shape();
                accumulate(&mut grads[x.0], Tensor::filled(r, c, g.data()[0]));
            }
            Op::Quantize(x) => accumulate(&mut grads[x.0], g.clone()),
            Op::BceLogitsSum { x, targets, weights } => {
                let xv = val(*x);
                let up = g.data()[0];
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, d) in dx.data_mut().iter_mut().enumerate() {
                    *d = up * weights[i] * (sigmoid(xv.data()[i]) - targets[i]);
                }
                accumulate(&mut grads[x.0], dx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (a, &b) in out.data_mut().iter_mut().zip(g.row(r)) {
            *a += b;
        }
    }
    out
}

/// `(q_start, q_len, k_start, k_len, causal_offset)` for each independent
/// attention block.
fn attention_blocks(rq: usize, rk: usize, mask: &AttnMask) -> Vec<(usize, usize, usize, usize, Option<usize>)> {
    match *mask {
        AttnMask::Causal { q_offset } => {
            assert!(
                q_offset + rq <= rk,
                "causal attention: {rq} queries at offset {q_offset} need at least that many keys, got {rk}"
            );
            vec![(0, rq, 0, rk, Some(q_offset))]
        }
        AttnMask::Blocks { size } => {
            assert_eq!(rq, rk, "block attention needs matching query/key rows");
            assert!(size > 0 && rq.is_multiple_of(size), "rows not divisible by block size");
            (0..rq / size).map(|b| (b * size, size, b * size, size, None)).collect()
        }
        AttnMask::CausalSegments(ref lens) => {
            assert_eq!(rq, rk, "segment attention needs matching query/key rows");
            assert_eq!(lens.iter().sum::<usize>(), rq, "segment lengths do not cover the rows");
            let mut start = 0;
            lens.iter()
                .map(|&n| {
                    let b = (start, n, start, n, Some(0));
                    start += n;
                    b
                })
                .collect()
        }
    }
}

fn softmax_rows_masked(s: &mut Tensor, causal_offset: Option<usize>) {
    let kn = s.cols();
    for r in 0..s.rows() {
        let limit = causal_offset.map_or(kn, |o| (o + r + 1).min(kn));
        let row = s.row_mut(r);
        let max = row[..limit].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for x in row[..limit].iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = 1.0 / sum;
        for x in row[..limit].iter_mut() {
            *x *= inv;
        }
        for x in row[limit..].iter_mut() {
            *x = 0.0;
        }
    }
}

const ROPE_BASE: f64 = 10_000.0;

fn rope_apply(t: &mut Tensor, heads: usize, positions: &[usize], inverse: bool) {
    let d = t.cols();
    assert!(d.is_multiple_of(heads), "rope: width not divisible by heads");
    let hd = d / heads;
    assert!(hd.is_multiple_of(2), "rope: head dim must be even");
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / hd as f64))
        .collect();
    for r in 0..t.rows() {
        let pos = positions[r] as f64;
        let row = t.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos * f).sin_cos();
            let (sin, cos) = (sin as f32, cos as f32);
            let sin = if inverse { -sin } else { sin };
            for h in 0..heads {
                let a = h * hd + i;
                let b = a + half;
                let (x1, x2) = (row[a], row[b]);
                row[a] = x1 * cos - x2 * sin;
                row[b] = x1 * sin + x2 * cos;
            }
        }
    }
}

pub(crate) fn im2col_forward(x: &Tensor, kernel: usize, stride: usize, pad_left: usize) -> Tensor {
    let (t, c) = x.shape();
    assert!(stride > 0 && kernel > 0, "im2col: zero kernel or stride");
    assert!(
        t + pad_left >= kernel,
        "im2col: input of {t} rows shorter than kernel {kernel}"
    );
    let t_out = (t + pad_left - kernel) / stride + 1;
    let mut out = Tensor::zeros(t_out, kernel * c);
    for o in 0..t_out {
        let row = out.row_mut(o);
        for j in 0..kernel {
            let p = (o * stride + j) as isize - pad_left as isize;
            if p >= 0 && (p as usize) < t {
                row[j * c..(j + 1) * c].copy_from_slice(x.row(p as usize));
            }
        }
    }
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient that reached node `v`, if any flowed there.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Sparse per-parameter gradient set, summable across graphs.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// In-place sum; `other` must come from the same parameter store.
    pub fn merge(&mut self, other: ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            if let Some(g) = g {
                accumulate(slot, g);
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}
