//! Parameter storage and the transformer building blocks shared by LocEnc,
//! TSLM, RALM and LocDiT.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AttnMask, Graph, ParamId, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-6;

/// Named parameter arrays in insertion order. The order is part of the
/// checkpoint format, so it must be deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Panics on duplicate names; parameter layout is fixed by code.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrite values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(a.shape(), b.shape());
            a.data_mut().copy_from_slice(b.data());
        }
    }
}

/// Initialiser bound to one store and RNG stream.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f32) -> ParamId {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut *self.rng)).collect();
        self.store.insert(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f32) -> ParamId {
        self.store.insert(name, Tensor::filled(rows, cols, value))
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f32) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.insert(name, Tensor::from_vec(rows, cols, data))
    }
}

/// `y = x W + b`, with `W` stored `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self::with_std(init, name, fan_in, fan_out, bias, 1.0 / (fan_in as f32).sqrt())
    }

    pub fn with_std(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool, std: f32) -> Self {
        let w = init.normal(&format!("{name}.w"), fan_in, fan_out, std);
        let b = bias.then(|| init.constant(&format!("{name}.b"), 1, fan_out, 0.0));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.tensor(self.w).cols()
    }
}

/// Two-layer SiLU feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    up: Linear,
    down: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize, out_std: f32) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden, true),
            down: Linear::with_std(init, &format!("{name}.down"), hidden, dim, true, out_std),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// Fused QKV projection plus output projection.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

/// Cached keys (post-rotary) and values for one causal layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerKv {
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

impl LayerKv {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, out_std: f32) -> Self {
        Self {
            qkv: Linear::new(init, &format!("{name}.qkv"), dim, 3 * dim, false),
            out: Linear::with_std(init, &format!("{name}.out"), dim, dim, false, out_std),
            heads,
        }
    }

    /// Bidirectional attention within blocks of `block` rows.
    pub fn forward_blocks(&self, g: &mut Graph, x: Var, block: usize) -> Var {
        let d = g.shape(x).1;
        let qkv = self.qkv.forward(g, x);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let a = g.attention(q, k, v, self.heads, AttnMask::Blocks { size: block });
        self.out.forward(g, a)
    }

    /// Packed independent causal sequences; positions restart at zero in
    /// each segment.
    pub fn forward_segments(&self, g: &mut Graph, x: Var, lens: &[usize]) -> Var {
        let d = g.shape(x).1;
        let qkv = self.qkv.forward(g, x);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let positions: Vec<usize> = lens.iter().flat_map(|&n| 0..n).collect();
        let q = g.rope_at(q, self.heads, positions.clone());
        let k = g.rope_at(k, self.heads, positions);
        let a = g.attention(q, k, v, self.heads, AttnMask::CausalSegments(lens.to_vec()));
        self.out.forward(g, a)
    }

    /// Causal attention with rotary positions. New rows start at
    /// `cache.len()`; the cache is extended with their keys and values.
    pub fn forward_causal(&self, g: &mut Graph, x: Var, cache: &mut LayerKv) -> Var {
        let d = g.shape(x).1;
        let offset = cache.len();
        let qkv = self.qkv.forward(g, x);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let q = g.rope(q, self.heads, offset);
        let k = g.rope(k, self.heads, offset);
        let (k_all, v_all) = match (&cache.k, &cache.v) {
            (Some(pk), Some(pv)) => {
                let pk = g.constant(pk.clone());
                let pv = g.constant(pv.clone());
                (g.concat_rows(&[pk, k]), g.concat_rows(&[pv, v]))
            }
            _ => (k, v),
        };
        cache.k = Some(g.value(k_all).clone());
        cache.v = Some(g.value(v_all).clone());
        let a = g.attention(q, k_all, v_all, self.heads, AttnMask::Causal { q_offset: offset });
        self.out.forward(g, a)
    }
}

/// Pre-norm transformer layer (RMSNorm, attention, SiLU MLP).
#[derive(Clone, Copy, Debug)]
pub struct Block {
    norm1: ParamId,
    attn: SelfAttention,
    norm2: ParamId,
    mlp: Mlp,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, ffn: usize, layers: usize) -> Self {
        // residual branches scaled down with depth
        let out_std = 1.0 / ((dim as f32).sqrt() * (2.0 * layers as f32).sqrt());
        Self {
            norm1: init.constant(&format!("{name}.norm1"), 1, dim, 1.0),
            attn: SelfAttention::new(init, &format!("{name}.attn"), dim, heads, out_std),
            norm2: init.constant(&format!("{name}.norm2"), 1, dim, 1.0),
            mlp: Mlp::new(
                init,
                &format!("{name}.mlp"),
                dim,
                ffn,
                1.0 / ((ffn as f32).sqrt() * (2.0 * layers as f32).sqrt()),
            ),
        }
    }

    fn mlp_half(&self, g: &mut Graph, x: Var) -> Var {
        let n2 = g.param(self.norm2);
        let h = g.rms_norm(x, n2, NORM_EPS);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }

    pub fn forward_blocks(&self, g: &mut Graph, x: Var, block: usize) -> Var {
        let n1 = g.param(self.norm1);
        let h = g.rms_norm(x, n1, NORM_EPS);
        let h = self.attn.forward_blocks(g, h, block);
        let x = g.add(x, h);
        self.mlp_half(g, x)
    }

    pub fn forward_segments(&self, g: &mut Graph, x: Var, lens: &[usize]) -> Var {
        let n1 = g.param(self.norm1);
        let h = g.rms_norm(x, n1, NORM_EPS);
        let h = self.attn.forward_segments(g, h, lens);
        let x = g.add(x, h);
        self.mlp_half(g, x)
    }

    pub fn forward_causal(&self, g: &mut Graph, x: Var, cache: &mut LayerKv) -> Var {
        let n1 = g.param(self.norm1);
        let h = g.rms_norm(x, n1, NORM_EPS);
        let h = self.attn.forward_causal(g, h, cache);
        let x = g.add(x, h);
        self.mlp_half(g, x)
    }
}

/// Incremental decoding state for a causal [`Stack`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); layers],
        }
    }

    /// Number of positions already consumed.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A stack of transformer blocks with a final RMSNorm.
#[derive(Clone, Debug)]
pub struct Stack {
    blocks: Vec<Block>,
    final_norm: ParamId,
}

impl Stack {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, ffn: usize, layers: usize) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(init, &format!("{name}.layers.{i}"), dim, heads, ffn, layers))
            .collect();
        Self {
            blocks,
            final_norm: init.constant(&format!("{name}.final_norm"), 1, dim, 1.0),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward_blocks(&self, g: &mut Graph, mut x: Var, block: usize) -> Var {
        for b in &self.blocks {
            x = b.forward_blocks(g, x, block);
        }
        let n = g.param(self.final_norm);
        g.rms_norm(x, n, NORM_EPS)
    }

    /// Causal pass over packed independent sequences of lengths `lens`.
    pub fn forward_segments(&self, g: &mut Graph, mut x: Var, lens: &[usize]) -> Var {
        for b in &self.blocks {
            x = b.forward_segments(g, x, lens);
        }
        let n = g.param(self.final_norm);
        g.rms_norm(x, n, NORM_EPS)
    }

    /// Causal pass over new rows appended after everything already in `cache`.
    pub fn forward_causal(&self, g: &mut Graph, mut x: Var, cache: &mut KvCache) -> Var {
        assert_eq!(cache.layers.len(), self.blocks.len(), "cache depth mismatch");
        for (b, c) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = b.forward_causal(g, x, c);
        }
        let n = g.param(self.final_norm);
        g.rms_norm(x, n, NORM_EPS)
    }
}
