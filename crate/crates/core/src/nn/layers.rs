//! Layer builders: small structs that register named parameters and build
//! graph nodes on a [`Tape`]. Layers own no values, only names and shapes, so
//! the same definition drives init, forward, checkpointing and freezing.

use ndarray::Array1;

use super::graph::{AttnMeta, NodeId};
use super::params::{ParamStore, Tape};

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Linear { name: name.into(), cin, cout, zero_init: false }
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, store: &mut ParamStore, trainable: bool) {
        let std = if self.zero_init { 0.0 } else { (1.0 / self.cin as f64).sqrt() };
        store.register(&format!("{}.w", self.name), &[self.cout, self.cin], std, trainable);
        store.register(&format!("{}.b", self.name), &[self.cout], 0.0, trainable);
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.p(&format!("{}.w", self.name));
        let b = t.p(&format!("{}.b", self.name));
        t.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.into(), cin, cout, k, stride, pad, zero_init: false }
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, store: &mut ParamStore, trainable: bool) {
        let fan_in = self.cin * self.k * self.k;
        let std = if self.zero_init { 0.0 } else { (1.0 / fan_in as f64).sqrt() };
        store.register(
            &format!("{}.w", self.name),
            &[self.cout, self.cin, self.k, self.k],
            std,
            trainable,
        );
        store.register(&format!("{}.b", self.name), &[self.cout], 0.0, trainable);
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.p(&format!("{}.w", self.name));
        let b = t.p(&format!("{}.b", self.name));
        t.g.conv2d(x, w, Some(b), (self.stride, self.stride), (self.pad, self.pad))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub c: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, c: usize, groups: usize) -> Self {
        GroupNorm { name: name.into(), c, groups }
    }

    pub fn register(&self, store: &mut ParamStore, trainable: bool) {
        store.register_value(
            &format!("{}.g", self.name),
            Array1::<f64>::ones(self.c).into_dyn(),
            trainable,
        );
        store.register(&format!("{}.b", self.name), &[self.c], 0.0, trainable);
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let gamma = t.p(&format!("{}.g", self.name));
        let beta = t.p(&format!("{}.b", self.name));
        t.g.group_norm(x, gamma, beta, self.groups, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub c: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, c: usize) -> Self {
        LayerNorm { name: name.into(), c }
    }

    pub fn register(&self, store: &mut ParamStore, trainable: bool) {
        store.register_value(
            &format!("{}.g", self.name),
            Array1::<f64>::ones(self.c).into_dyn(),
            trainable,
        );
        store.register(&format!("{}.b", self.name), &[self.c], 0.0, trainable);
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let gamma = t.p(&format!("{}.g", self.name));
        let beta = t.p(&format!("{}.b", self.name));
        t.g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Multi-head attention over a single sequence: x (S,C) attending to ctx (T,C).
/// With `zero_out` the output projection starts at zero, so the layer is
/// initially inert behind a residual connection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, ctx_dim: usize, heads: usize, zero_out: bool) -> Self {
        assert_eq!(dim % heads, 0);
        let out = if zero_out {
            Linear::new(format!("{name}.out"), dim, dim).zero_init()
        } else {
            Linear::new(format!("{name}.out"), dim, dim)
        };
        MultiHeadAttention {
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), ctx_dim, dim),
            v: Linear::new(format!("{name}.v"), ctx_dim, dim),
            out,
            heads,
        }
    }

    pub fn register(&self, store: &mut ParamStore, trainable: bool) {
        self.q.register(store, trainable);
        self.k.register(store, trainable);
        self.v.register(store, trainable);
        self.out.register(store, trainable);
    }

    pub fn fwd(&self, t: &mut Tape, x: NodeId, ctx: NodeId, meta: Option<AttnMeta>) -> NodeId {
        let dim = self.q.cout;
        let dh = dim / self.heads;
        let q = self.q.fwd(t, x);
        let k = self.k.fwd(t, ctx);
        let v = self.v.fwd(t, ctx);
        let qh = t.g.split_heads(q, self.heads);
        let kh = t.g.split_heads(k, self.heads);
        let vh = t.g.split_heads(v, self.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let o = t.g.attention(qh, kh, vh, scale, meta);
        let om = t.g.merge_heads(o);
        self.out.fwd(t, om)
    }
}

/// Sinusoidal embedding of an integer timestep (standard diffusion encoding).
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Flattens a (N,C,H,W) node to per-sample (H*W, C) token matrices.
pub fn spatial_to_tokens(t: &mut Tape, x: NodeId, n: usize) -> Vec<NodeId> {
    let shape = t.g.value(x).shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    (0..n)
        .map(|ni| {
            let xi = t.g.select0(x, ni);
            let flat = t.g.reshape(xi, &[c, h * w]);
            t.g.transpose2(flat)
        })
        .collect()
}

/// Inverse of [`spatial_to_tokens`]: stacks per-sample (H*W, C) back to (N,C,H,W).
pub fn tokens_to_spatial(t: &mut Tape, tokens: &[NodeId], c: usize, h: usize, w: usize) -> NodeId {
    let per: Vec<NodeId> = tokens
        .iter()
        .map(|&tok| {
            let tr = t.g.transpose2(tok);
            t.g.reshape(tr, &[c, h, w])
        })
        .collect();
    t.g.stack0(&per)
}

/// (C,) -> (1,C) helper for building context matrices from vectors.
pub fn row_matrix(t: &mut Tape, v: NodeId) -> NodeId {
    let len = t.g.value(v).len();
    t.g.reshape(v, &[1, len])
}
