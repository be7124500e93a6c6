//! Reverse-mode autodiff on dynamically shaped f64 arrays.
//!
//! A [`Graph`] is a tape: builder methods compute values eagerly and append a
//! node describing how to push gradients back to the node's parents.
//! Everything is f64 so finite-difference checks hold to tight tolerances.
//! Ops keep whatever intermediate state their backward pass needs (im2col
//! column matrices, attention maps, normalization statistics).

use ndarray::prelude::*;
use ndarray::{concatenate, ArrayD, Axis, IxDyn};
use rayon::prelude::*;

pub type Arr = ArrayD<f64>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

/// Which attention layer a captured map came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMeta {
    /// "unet", "writenet" or "attnx".
    pub branch: String,
    /// "cross" or "self".
    pub kind: String,
    /// Spatial resolution of the query grid (e.g. 8 for an 8x8 block).
    pub resolution: usize,
    /// Index of the attention layer within its branch.
    pub layer_index: usize,
    /// Batch sample the map belongs to.
    pub sample: usize,
}

/// A captured attention map: one row per query, one column per key token.
/// Rows sum to 1 (softmax output), heads stacked along axis 0.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub meta: AttnMeta,
    /// Shape (heads, queries, keys).
    pub map: Array3<f64>,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// a + s * b
    AddScaled(NodeId, NodeId, f64),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Arr),
    Scale(NodeId, f64),
    /// x: (N,C,H,W) plus per-sample channel vector b: (N,C), broadcast over H,W.
    AddSpatialBroadcast(NodeId, NodeId),
    /// x: (...,Cin) w: (Cout,Cin) b: (Cout,)
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Matmul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
        cols: Vec<Array2<f64>>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Arr,
        inv_std: Array2<f64>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Arr,
        inv_std: Arr,
    },
    Silu(NodeId),
    Sigmoid(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: f64,
        map: Array3<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Overwrite selected rows of a (S,D) matrix with (D,) vectors.
    ReplaceRows {
        x: NodeId,
        rows: Vec<(usize, NodeId)>,
    },
    ConcatAxis {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Stack0(Vec<NodeId>),
    SelectAxis0 {
        x: NodeId,
        idx: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    Transpose2(NodeId),
    /// (S, h*dh) -> (h, S, dh)
    SplitHeads {
        x: NodeId,
        heads: usize,
    },
    /// (h, S, dh) -> (S, h*dh)
    MergeHeads(NodeId),
    UpsampleNearest2(NodeId),
    /// (N,C,H,W) -> (N,C) global average pool.
    MeanSpatial(NodeId),
    MeanAll(NodeId),
    MseLoss {
        pred: NodeId,
        target: Arr,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Arr,
    op: Op,
    requires_grad: bool,
}

/// Accumulated gradients after a backward pass, indexed by node.
pub struct Grads {
    g: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Arr> {
        self.g[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// When set, attention ops append their softmax maps here.
    pub capture: Option<Vec<AttentionRecord>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), capture: None }
    }

    pub fn with_capture() -> Self {
        Graph { nodes: Vec::new(), capture: Some(Vec::new()) }
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// a + s * b with a compile-time-constant gain s.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, s: f64) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add_scaled shape");
        let v = self.value(a) + &(self.value(b) * s);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddScaled(a, b, s), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Arr) -> NodeId {
        assert_eq!(self.value(a).shape(), c.shape(), "mul_const shape");
        let v = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// x (N,C,H,W) + b (N,C) broadcast over the spatial dims.
    pub fn add_spatial_broadcast(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        assert_eq!(xs.len(), 4, "add_spatial_broadcast expects 4d x");
        assert_eq!(&bs[..], &[xs[0], xs[1]], "add_spatial_broadcast bias shape");
        let mut v = self.value(x).clone();
        {
            let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let mut v4 = v.view_mut().into_dimensionality::<Ix4>().unwrap();
            for n in 0..xs[0] {
                for c in 0..xs[1] {
                    v4.slice_mut(s![n, c, .., ..]).mapv_inplace(|t| t + bv[[n, c]]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(v, Op::AddSpatialBroadcast(x, b), rg)
    }

    /// x (..., Cin) @ w^T (Cout, Cin) + b. Leading dims preserved.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2d");
        let cin = *xs.last().unwrap();
        assert_eq!(ws[1], cin, "linear fan-in mismatch");
        let m: usize = xs[..xs.len() - 1].iter().product();
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((m, cin))
            .unwrap()
            .to_owned();
        let w2 = self.value(w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut out = x2.dot(&w2.t());
        if let Some(bid) = b {
            let bv = self.value(bid).view().into_dimensionality::<Ix1>().unwrap().to_owned();
            out += &bv;
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(ws[0]);
        let v = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        self.push(v, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let a2 = self.value(a).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let b2 = self.value(b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let v = a2.dot(&b2).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    /// x (N,Cin,H,W), w (Cout,Cin,kh,kw). Zero padding, no dilation.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4d");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4d");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (wdt + 2 * pad.1 - kw) / stride.1 + 1;

        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wmat = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let bias = b.map(|bid| {
            self.value(bid)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });

        let per_sample: Vec<(Array2<f64>, Array2<f64>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let cols = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
                let mut out = wmat.dot(&cols);
                if let Some(bv) = &bias {
                    for (mut row, bb) in out.rows_mut().into_iter().zip(bv.iter()) {
                        row.mapv_inplace(|t| t + bb);
                    }
                }
                (out, cols)
            })
            .collect();

        let mut v = Array4::<f64>::zeros((n, cout, oh, ow));
        let mut cols_cache = Vec::with_capacity(n);
        for (ni, (out, cols)) in per_sample.into_iter().enumerate() {
            let out4 = out.into_shape_with_order((cout, oh, ow)).unwrap();
            v.index_axis_mut(Axis(0), ni).assign(&out4);
            cols_cache.push(cols);
        }
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            v.into_dyn(),
            Op::Conv2d { x, w, b, stride, pad, cols: cols_cache },
            rg,
        )
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "group_norm input must be 4d");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let cg = c / groups;
        let gsize = (cg * h * w) as f64;
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();

        let mut xhat = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((n, groups));
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for g in 0..groups {
                let sl = s![ni, g * cg..(g + 1) * cg, .., ..];
                let xg = x4.slice(sl);
                let mean = xg.sum() / gsize;
                let var = xg.mapv(|t| (t - mean) * (t - mean)).sum() / gsize;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[[ni, g]] = istd;
                let xh = xg.mapv(|t| (t - mean) * istd);
                xhat.slice_mut(sl).assign(&xh);
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let y = xh.index_axis(Axis(0), cc).mapv(|t| t * gv[ch] + bv[ch]);
                    out.slice_mut(s![ni, ch, .., ..]).assign(&y);
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out.into_dyn(),
            Op::GroupNorm { x, gamma, beta, groups, xhat: xhat.into_dyn(), inv_std },
            rg,
        )
    }

    /// Normalizes the last axis. x: (..., C), gamma/beta: (C,).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().unwrap();
        let m: usize = xs[..xs.len() - 1].iter().product();
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((m, c))
            .unwrap()
            .to_owned();
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut xhat = Array2::<f64>::zeros((m, c));
        let mut inv_std = Array1::<f64>::zeros(m);
        let mut out = Array2::<f64>::zeros((m, c));
        for i in 0..m {
            let row = x2.row(i);
            let mean = row.sum() / c as f64;
            let var = row.mapv(|t| (t - mean) * (t - mean)).sum() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (x2[[i, j]] - mean) * istd;
                xhat[[i, j]] = xh;
                out[[i, j]] = xh * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out.into_shape_with_order(IxDyn(&xs)).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: xhat.into_shape_with_order(IxDyn(&xs)).unwrap(),
                inv_std: inv_std.into_dyn(),
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|t| t * sigmoid(t));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn sigmoid_node(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Scaled dot-product attention. q (B,S,dh), k (B,T,dh), v (B,T,dh) -> (B,S,dh).
    /// The softmax map is saved for backward and, when `meta` is given and
    /// capture is enabled, recorded as an [`AttentionRecord`].
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: f64,
        meta: Option<AttnMeta>,
    ) -> NodeId {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        assert_eq!(qs.len(), 3, "attention q must be 3d");
        assert_eq!(ks.len(), 3, "attention k must be 3d");
        assert_eq!(qs[0], ks[0], "attention batch mismatch");
        assert_eq!(qs[2], ks[2], "attention head dim mismatch");
        let (bb, ss, dh) = (qs[0], qs[1], qs[2]);
        let tt = ks[1];
        let q3 = self.value(q).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let k3 = self.value(k).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let v3 = self.value(v).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let mut map = Array3::<f64>::zeros((bb, ss, tt));
        let mut out = Array3::<f64>::zeros((bb, ss, dh));
        for b in 0..bb {
            let qb = q3.index_axis(Axis(0), b);
            let kb = k3.index_axis(Axis(0), b);
            let vb = v3.index_axis(Axis(0), b);
            let mut scores = qb.dot(&kb.t());
            scores *= scale;
            for mut row in scores.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |a, &t| a.max(t));
                row.mapv_inplace(|t| (t - mx).exp());
                let sum = row.sum();
                row.mapv_inplace(|t| t / sum);
            }
            out.index_axis_mut(Axis(0), b).assign(&scores.dot(&vb));
            map.index_axis_mut(Axis(0), b).assign(&scores);
        }
        if let (Some(buf), Some(meta)) = (self.capture.as_mut(), meta) {
            buf.push(AttentionRecord { meta, map: map.clone() });
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out.into_dyn(), Op::Attention { q, k, v, scale, map }, rg)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t2 = self.value(table).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let d = t2.shape()[1];
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t2.row(id));
        }
        let rg = self.rg(table);
        self.push(out.into_dyn(), Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Overwrites row `idx` of x (S,D) with the (D,) vector node, per pair.
    pub fn replace_rows(&mut self, x: NodeId, rows: &[(usize, NodeId)]) -> NodeId {
        let mut v = self
            .value(x)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let mut rg = self.rg(x);
        for &(idx, rid) in rows {
            let r = self.value(rid).view().into_dimensionality::<Ix1>().unwrap();
            v.row_mut(idx).assign(&r);
            rg = rg || self.rg(rid);
        }
        self.push(v.into_dyn(), Op::ReplaceRows { x, rows: rows.to_vec() }, rg)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatAxis { parts: parts.to_vec(), axis }, rg)
    }

    pub fn stack0(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let inner = self.value(parts[0]).shape().to_vec();
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let mut v = Arr::zeros(IxDyn(&shape));
        for (i, &p) in parts.iter().enumerate() {
            assert_eq!(self.value(p).shape(), &inner[..], "stack0 shape");
            v.index_axis_mut(Axis(0), i).assign(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Stack0(parts.to_vec()), rg)
    }

    pub fn select0(&mut self, x: NodeId, idx: usize) -> NodeId {
        let v = self.value(x).index_axis(Axis(0), idx).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SelectAxis0 { x, idx }, rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let v = x2.slice(s![start..start + len, ..]).to_owned().into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::SliceRows { x, start, len }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size")
            .to_owned();
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let v = x2.t().to_owned().into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::Transpose2(x), rg)
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (sr, c) = x2.dim();
        assert_eq!(c % heads, 0, "split_heads channel divisibility");
        let dh = c / heads;
        let mut v = Array3::<f64>::zeros((heads, sr, dh));
        for h in 0..heads {
            for si in 0..sr {
                for d in 0..dh {
                    v[[h, si, d]] = x2[[si, h * dh + d]];
                }
            }
        }
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::SplitHeads { x, heads }, rg)
    }

    pub fn merge_heads(&mut self, x: NodeId) -> NodeId {
        let x3 = self.value(x).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (heads, sr, dh) = x3.dim();
        let mut v = Array2::<f64>::zeros((sr, heads * dh));
        for h in 0..heads {
            for si in 0..sr {
                for d in 0..dh {
                    v[[si, h * dh + d]] = x3[[h, si, d]];
                }
            }
        }
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::MergeHeads(x), rg)
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x4.dim();
        let mut v = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        v[[ni, ci, i, j]] = x4[[ni, ci, i / 2, j / 2]];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::UpsampleNearest2(x), rg)
    }

    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x4.dim();
        let mut v = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                v[[ni, ci]] = x4.slice(s![ni, ci, .., ..]).sum() / (h * w) as f64;
            }
        }
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::MeanSpatial(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let v = Array0::from_elem((), self.value(x).sum() / n).into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::MeanAll(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: NodeId, target: Arr) -> NodeId {
        assert_eq!(self.value(pred).shape(), target.shape(), "mse shape");
        let diff = self.value(pred) - &target;
        let v = Array0::from_elem((), diff.mapv(|t| t * t).sum() / diff.len() as f64).into_dyn();
        let rg = self.rg(pred);
        self.push(v, Op::MseLoss { pred, target }, rg)
    }

    /// Mean cross-entropy over rows of (S,V) logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let l2 = self.value(logits).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (srows, _v) = l2.dim();
        assert_eq!(srows, targets.len(), "cross entropy target count");
        let mut probs = l2.clone();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &t| a.max(t));
            row.mapv_inplace(|t| (t - mx).exp());
            let sum = row.sum();
            row.mapv_inplace(|t| t / sum);
            loss -= row[targets[i]].max(1e-300).ln();
        }
        loss /= srows as f64;
        let v = Array0::from_elem((), loss).into_dyn();
        let rg = self.rg(logits);
        self.push(v, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }, rg)
    }

    /// Backpropagates from a scalar node. Returns per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut g: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Arr::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            if g[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dout = g[i].take().unwrap();
            self.backprop_node(i, &dout, &mut g);
            g[i] = Some(dout);
        }
        Grads { g }
    }

    fn backprop_node(&self, i: usize, dout: &Arr, g: &mut Vec<Option<Arr>>) {
        let accum = |g: &mut Vec<Option<Arr>>, id: NodeId, delta: Arr| {
            match &mut g[id.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        // Gradients only flow into parents that require grad.
        macro_rules! push_if {
            ($id:expr, $delta:expr) => {
                if self.rg($id) {
                    accum(g, $id, $delta);
                }
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push_if!(*a, dout.clone());
                push_if!(*b, dout.clone());
            }
            Op::AddScaled(a, b, s) => {
                push_if!(*a, dout.clone());
                push_if!(*b, dout * *s);
            }
            Op::Mul(a, b) => {
                push_if!(*a, dout * self.value(*b));
                push_if!(*b, dout * self.value(*a));
            }
            Op::MulConst(a, c) => {
                push_if!(*a, dout * c);
            }
            Op::Scale(a, s) => {
                push_if!(*a, dout * *s);
            }
            Op::AddSpatialBroadcast(x, b) => {
                push_if!(*x, dout.clone());
                if self.rg(*b) {
                    let d4 = dout.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, _, _) = d4.dim();
                    let mut db = Array2::<f64>::zeros((n, c));
                    for ni in 0..n {
                        for ci in 0..c {
                            db[[ni, ci]] = d4.slice(s![ni, ci, .., ..]).sum();
                        }
                    }
                    accum(g, *b, db.into_dyn());
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let cin = *xs.last().unwrap();
                let m: usize = xs[..xs.len() - 1].iter().product();
                let x2 = self.value(*x).view().into_shape_with_order((m, cin)).unwrap().to_owned();
                let w2 = self.value(*w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let d2 = dout.view().into_shape_with_order((m, ws[0])).unwrap().to_owned();
                if self.rg(*x) {
                    let dx = d2.dot(&w2);
                    accum(g, *x, dx.into_shape_with_order(IxDyn(&xs)).unwrap());
                }
                if self.rg(*w) {
                    let dw = d2.t().dot(&x2);
                    accum(g, *w, dw.into_dyn());
                }
                if let Some(bid) = b {
                    if self.rg(*bid) {
                        let db = d2.sum_axis(Axis(0));
                        accum(g, *bid, db.into_dyn());
                    }
                }
            }
            Op::Matmul(a, b) => {
                let a2 = self.value(*a).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let b2 = self.value(*b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let d2 = dout.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                push_if!(*a, d2.dot(&b2.t()).into_dyn());
                push_if!(*b, a2.t().dot(&d2).into_dyn());
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let d4 = dout.view().into_dimensionality::<Ix4>().unwrap();
                let oh = d4.dim().2;
                let ow = d4.dim().3;
                let wmat = self
                    .value(*w)
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let need_dx = self.rg(*x);
                let need_dw = self.rg(*w);
                let per_sample: Vec<(Option<Array3<f64>>, Option<Array2<f64>>)> = (0..n)
                    .into_par_iter()
                    .map(|ni| {
                        let dmat = d4
                            .index_axis(Axis(0), ni)
                            .to_owned()
                            .into_shape_with_order((cout, oh * ow))
                            .unwrap();
                        let dw = if need_dw { Some(dmat.dot(&cols[ni].t())) } else { None };
                        let dx = if need_dx {
                            let dcols = wmat.t().dot(&dmat);
                            Some(col2im(&dcols, cin, h, wdt, kh, kw, *stride, *pad, oh, ow))
                        } else {
                            None
                        };
                        (dx, dw)
                    })
                    .collect();
                if need_dx {
                    let mut dx = Array4::<f64>::zeros((n, cin, h, wdt));
                    for (ni, (dxs, _)) in per_sample.iter().enumerate() {
                        dx.index_axis_mut(Axis(0), ni).assign(dxs.as_ref().unwrap());
                    }
                    accum(g, *x, dx.into_dyn());
                }
                if need_dw {
                    let mut dw = Array2::<f64>::zeros((cout, cin * kh * kw));
                    for (_, dws) in &per_sample {
                        dw += dws.as_ref().unwrap();
                    }
                    accum(g, *w, dw.into_shape_with_order(IxDyn(&ws)).unwrap());
                }
                if let Some(bid) = b {
                    if self.rg(*bid) {
                        let mut db = Array1::<f64>::zeros(cout);
                        for ni in 0..n {
                            for co in 0..cout {
                                db[co] += d4.slice(s![ni, co, .., ..]).sum();
                            }
                        }
                        accum(g, *bid, db.into_dyn());
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let cg = c / groups;
                let gsize = (cg * h * w) as f64;
                let d4 = dout.view().into_dimensionality::<Ix4>().unwrap();
                let xh4 = xhat.view().into_dimensionality::<Ix4>().unwrap();
                let gv = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                if self.rg(*gamma) {
                    let mut dg = Array1::<f64>::zeros(c);
                    for ch in 0..c {
                        for ni in 0..n {
                            dg[ch] += (&d4.slice(s![ni, ch, .., ..]) * &xh4.slice(s![ni, ch, .., ..])).sum();
                        }
                    }
                    accum(g, *gamma, dg.into_dyn());
                }
                if self.rg(*beta) {
                    let mut db = Array1::<f64>::zeros(c);
                    for ch in 0..c {
                        for ni in 0..n {
                            db[ch] += d4.slice(s![ni, ch, .., ..]).sum();
                        }
                    }
                    accum(g, *beta, db.into_dyn());
                }
                if self.rg(*x) {
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for gi in 0..*groups {
                            let sl = s![ni, gi * cg..(gi + 1) * cg, .., ..];
                            let xh = xh4.slice(sl).to_owned();
                            let mut dxh = d4.slice(sl).to_owned();
                            for cc in 0..cg {
                                let ch = gi * cg + cc;
                                dxh.index_axis_mut(Axis(0), cc).mapv_inplace(|t| t * gv[ch]);
                            }
                            let sum_dxh = dxh.sum();
                            let sum_dxh_xh = (&dxh * &xh).sum();
                            let istd = inv_std[[ni, gi]];
                            let dxg = xh.indexed_iter().fold(
                                Array3::<f64>::zeros((cg, h, w)),
                                |mut acc, (idx, &xhv)| {
                                    let dv = dxh[idx];
                                    acc[idx] = istd * (dv - sum_dxh / gsize - xhv * sum_dxh_xh / gsize);
                                    acc
                                },
                            );
                            dx.slice_mut(sl).assign(&dxg);
                        }
                    }
                    accum(g, *x, dx.into_dyn());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let xs = self.value(*x).shape().to_vec();
                let c = *xs.last().unwrap();
                let m: usize = xs[..xs.len() - 1].iter().product();
                let xh2 = xhat.view().into_shape_with_order((m, c)).unwrap().to_owned();
                let d2 = dout.view().into_shape_with_order((m, c)).unwrap().to_owned();
                let istd = inv_std.view().into_shape_with_order(m).unwrap().to_owned();
                let gv = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                if self.rg(*gamma) {
                    let dg = (&d2 * &xh2).sum_axis(Axis(0));
                    accum(g, *gamma, dg.into_dyn());
                }
                if self.rg(*beta) {
                    let db = d2.sum_axis(Axis(0));
                    accum(g, *beta, db.into_dyn());
                }
                if self.rg(*x) {
                    let mut dx = Array2::<f64>::zeros((m, c));
                    for i in 0..m {
                        let dxh: Array1<f64> = (0..c).map(|j| d2[[i, j]] * gv[j]).collect();
                        let sum_dxh = dxh.sum();
                        let sum_dxh_xh: f64 = (0..c).map(|j| dxh[j] * xh2[[i, j]]).sum();
                        for j in 0..c {
                            dx[[i, j]] = istd[i]
                                * (dxh[j] - sum_dxh / c as f64 - xh2[[i, j]] * sum_dxh_xh / c as f64);
                        }
                    }
                    accum(g, *x, dx.into_shape_with_order(IxDyn(&xs)).unwrap());
                }
            }
            Op::Silu(x) => {
                let dv = self.value(*x).mapv(|t| {
                    let st = sigmoid(t);
                    st * (1.0 + t * (1.0 - st))
                });
                push_if!(*x, dout * &dv);
            }
            Op::Sigmoid(x) => {
                let sv = self.value(i_node(i)).clone();
                push_if!(*x, dout * &(sv.mapv(|s| s * (1.0 - s))));
            }
            Op::Attention { q, k, v, scale, map } => {
                let q3 = self.value(*q).view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let k3 = self.value(*k).view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let v3 = self.value(*v).view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let d3 = dout.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let (bb, ss, dh) = q3.dim();
                let tt = k3.dim().1;
                let mut dq = Array3::<f64>::zeros((bb, ss, dh));
                let mut dk = Array3::<f64>::zeros((bb, tt, dh));
                let mut dv = Array3::<f64>::zeros((bb, tt, dh));
                for b in 0..bb {
                    let mb = map.index_axis(Axis(0), b);
                    let db = d3.index_axis(Axis(0), b);
                    let vb = v3.index_axis(Axis(0), b);
                    dv.index_axis_mut(Axis(0), b).assign(&mb.t().dot(&db));
                    let dm = db.dot(&vb.t());
                    let mut ds = Array2::<f64>::zeros((ss, tt));
                    for si in 0..ss {
                        let row_m = mb.row(si);
                        let row_dm = dm.row(si);
                        let dot: f64 = row_m.iter().zip(row_dm.iter()).map(|(a, b)| a * b).sum();
                        for ti in 0..tt {
                            ds[[si, ti]] = row_m[ti] * (row_dm[ti] - dot);
                        }
                    }
                    ds *= *scale;
                    dq.index_axis_mut(Axis(0), b).assign(&ds.dot(&k3.index_axis(Axis(0), b)));
                    dk.index_axis_mut(Axis(0), b).assign(&ds.t().dot(&q3.index_axis(Axis(0), b)));
                }
                push_if!(*q, dq.into_dyn());
                push_if!(*k, dk.into_dyn());
                push_if!(*v, dv.into_dyn());
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let ts = self.value(*table).shape().to_vec();
                    let d2 = dout.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dt = Array2::<f64>::zeros((ts[0], ts[1]));
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &d2.row(i);
                    }
                    accum(g, *table, dt.into_dyn());
                }
            }
            Op::ReplaceRows { x, rows } => {
                let d2 = dout.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                for &(idx, rid) in rows {
                    if self.rg(rid) {
                        accum(g, rid, d2.row(idx).to_owned().into_dyn());
                    }
                }
                if self.rg(*x) {
                    let mut dx = d2;
                    for &(idx, _) in rows {
                        dx.row_mut(idx).fill(0.0);
                    }
                    accum(g, *x, dx.into_dyn());
                }
            }
            Op::ConcatAxis { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let plen = self.value(p).shape()[*axis];
                    if self.rg(p) {
                        let sl = dout
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + plen))
                            .to_owned();
                        accum(g, p, sl);
                    }
                    offset += plen;
                }
            }
            Op::Stack0(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        accum(g, p, dout.index_axis(Axis(0), i).to_owned());
                    }
                }
            }
            Op::SelectAxis0 { x, idx } => {
                if self.rg(*x) {
                    let mut dx = Arr::zeros(self.value(*x).raw_dim());
                    dx.index_axis_mut(Axis(0), *idx).assign(dout);
                    accum(g, *x, dx);
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.rg(*x) {
                    let mut dx = Arr::zeros(self.value(*x).raw_dim());
                    let d2 = dout.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    dx2.slice_mut(s![*start..*start + *len, ..]).assign(&d2);
                    accum(g, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let dx = dout
                        .view()
                        .into_shape_with_order(self.value(*x).raw_dim())
                        .unwrap()
                        .to_owned();
                    accum(g, *x, dx);
                }
            }
            Op::Transpose2(x) => {
                if self.rg(*x) {
                    let d2 = dout.view().into_dimensionality::<Ix2>().unwrap();
                    accum(g, *x, d2.t().to_owned().into_dyn());
                }
            }
            Op::SplitHeads { x, heads } => {
                if self.rg(*x) {
                    let d3 = dout.view().into_dimensionality::<Ix3>().unwrap();
                    let (_, sr, dh) = d3.dim();
                    let mut dx = Array2::<f64>::zeros((sr, heads * dh));
                    for h in 0..*heads {
                        for si in 0..sr {
                            for d in 0..dh {
                                dx[[si, h * dh + d]] = d3[[h, si, d]];
                            }
                        }
                    }
                    accum(g, *x, dx.into_dyn());
                }
            }
            Op::MergeHeads(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    let (heads, sr, dh) = (xs[0], xs[1], xs[2]);
                    let d2 = dout.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array3::<f64>::zeros((heads, sr, dh));
                    for h in 0..heads {
                        for si in 0..sr {
                            for d in 0..dh {
                                dx[[h, si, d]] = d2[[si, h * dh + d]];
                            }
                        }
                    }
                    accum(g, *x, dx.into_dyn());
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.rg(*x) {
                    let d4 = dout.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h2, w2) = d4.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for i in 0..h2 {
                                for j in 0..w2 {
                                    dx[[ni, ci, i / 2, j / 2]] += d4[[ni, ci, i, j]];
                                }
                            }
                        }
                    }
                    accum(g, *x, dx.into_dyn());
                }
            }
            Op::MeanSpatial(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let d2 = dout.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    let inv = 1.0 / (h * w) as f64;
                    for ni in 0..n {
                        for ci in 0..c {
                            dx.slice_mut(s![ni, ci, .., ..]).fill(d2[[ni, ci]] * inv);
                        }
                    }
                    accum(g, *x, dx.into_dyn());
                }
            }
            Op::MeanAll(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len() as f64;
                    let dv = dout.iter().next().unwrap() / n;
                    accum(g, *x, Arr::from_elem(self.value(*x).raw_dim(), dv));
                }
            }
            Op::MseLoss { pred, target } => {
                if self.rg(*pred) {
                    let n = target.len() as f64;
                    let dv = dout.iter().next().unwrap();
                    let dp = (self.value(*pred) - target).mapv(|t| 2.0 * t / n * dv);
                    accum(g, *pred, dp);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let dv = dout.iter().next().unwrap();
                    let srows = targets.len() as f64;
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[[i, t]] -= 1.0;
                    }
                    dl.mapv_inplace(|p| p / srows * dv);
                    accum(g, *logits, dl.into_dyn());
                }
            }
        }
    }
}

// Reading back the already-computed output value inside backprop (sigmoid).
fn i_node(i: usize) -> NodeId {
    NodeId(i)
}

fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = c * kh * kw + ki * kw + kj;
                for i in 0..oh {
                    let ih = (i * stride.0 + ki) as isize - pad.0 as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let iw = (j * stride.1 + kj) as isize - pad.1 as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[[row, i * ow + j]] = x[[c, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = c * kh * kw + ki * kw + kj;
                for i in 0..oh {
                    let ih = (i * stride.0 + ki) as isize - pad.0 as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let iw = (j * stride.1 + kj) as isize - pad.1 as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[[c, ih as usize, iw as usize]] += dcols[[row, i * ow + j]];
                    }
                }
            }
        }
    }
    dx
}
