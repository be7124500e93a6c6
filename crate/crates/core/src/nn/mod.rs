//! Minimal f64 autodiff stack: tape graph, named parameters, layers, AdamW.

pub mod check;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Arr, AttentionRecord, AttnMeta, Grads, Graph, NodeId};
pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamStore, Tape};

#[cfg(test)]
mod tests {
    use super::check::{check_gradients, DEFAULT_EPS};
    use super::graph::{Arr, Graph, NodeId};
    use ndarray::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Arr::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn grad_add_mul_scale() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let a = g.add(ids[0], ids[1]);
            let m = g.mul(a, ids[1]);
            let s = g.scale(m, 0.7);
            let t = g.add_scaled(s, ids[0], -1.3);
            g.mean_all(t)
        };
        check_gradients(&build, &[randn(&[3, 4], 1), randn(&[3, 4], 2)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn grad_linear_silu() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.linear(ids[0], ids[1], Some(ids[2]));
            let z = g.silu(y);
            g.mean_all(z)
        };
        check_gradients(
            &build,
            &[randn(&[2, 5], 3), randn(&[4, 5], 4), randn(&[4], 5)],
            DEFAULT_EPS,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_sigmoid() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.matmul(ids[0], ids[1]);
            let z = g.sigmoid_node(y);
            g.mean_all(z)
        };
        check_gradients(&build, &[randn(&[3, 4], 6), randn(&[4, 2], 7)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn grad_conv2d() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), (2, 2), (1, 1));
            let z = g.silu(y);
            g.mean_all(z)
        };
        check_gradients(
            &build,
            &[randn(&[2, 3, 6, 6], 8), randn(&[4, 3, 3, 3], 9), randn(&[4], 10)],
            DEFAULT_EPS,
            1e-6,
        );
    }

    #[test]
    fn grad_group_norm() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5);
            let z = g.mul(y, y);
            g.mean_all(z)
        };
        check_gradients(
            &build,
            &[randn(&[2, 4, 3, 3], 11), randn(&[4], 12), randn(&[4], 13)],
            DEFAULT_EPS,
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            let z = g.mul(y, y);
            g.mean_all(z)
        };
        check_gradients(
            &build,
            &[randn(&[3, 6], 14), randn(&[6], 15), randn(&[6], 16)],
            DEFAULT_EPS,
            1e-5,
        );
    }

    #[test]
    fn grad_attention() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let o = g.attention(ids[0], ids[1], ids[2], 0.5, None);
            let z = g.mul(o, o);
            g.mean_all(z)
        };
        check_gradients(
            &build,
            &[randn(&[2, 3, 4], 17), randn(&[2, 5, 4], 18), randn(&[2, 5, 4], 19)],
            DEFAULT_EPS,
            1e-5,
        );
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::with_capture();
        let q = g.leaf(randn(&[2, 3, 4], 20), false);
        let k = g.leaf(randn(&[2, 5, 4], 21), false);
        let v = g.leaf(randn(&[2, 5, 4], 22), false);
        let meta = super::AttnMeta {
            branch: "unet".into(),
            kind: "cross".into(),
            resolution: 8,
            layer_index: 0,
            sample: 0,
        };
        g.attention(q, k, v, 0.5, Some(meta));
        let records = g.capture.take().unwrap();
        assert_eq!(records.len(), 1);
        for h in 0..2 {
            for s in 0..3 {
                let sum: f64 = records[0].map.slice(s![h, s, ..]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_embedding_replace_rows() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let e = g.embedding(ids[0], &[0, 2, 1, 2]);
            let r = g.replace_rows(e, &[(1, ids[1])]);
            let z = g.mul(r, r);
            g.mean_all(z)
        };
        check_gradients(&build, &[randn(&[3, 4], 23), randn(&[4], 24)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn grad_concat_stack_select_slice() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let c = g.concat(&[ids[0], ids[1]], 0);
            let s = g.slice_rows(c, 1, 3);
            let st = g.stack0(&[s, s]);
            let sel = g.select0(st, 1);
            let z = g.mul(sel, sel);
            g.mean_all(z)
        };
        check_gradients(&build, &[randn(&[2, 3], 25), randn(&[2, 3], 26)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn grad_shapes_upsample_pool() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let u = g.upsample_nearest2(ids[0]);
            let p = g.mean_spatial(u);
            let z = g.mul(p, p);
            g.mean_all(z)
        };
        check_gradients(&build, &[randn(&[2, 3, 2, 2], 27)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn grad_split_merge_heads_transpose() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let h = g.split_heads(ids[0], 2);
            let m = g.merge_heads(h);
            let t = g.transpose2(m);
            let z = g.mul(t, t);
            g.mean_all(z)
        };
        check_gradients(&build, &[randn(&[3, 4], 28)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn grad_mse_and_cross_entropy() {
        let target = randn(&[3, 2], 29);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let l1 = g.mse_loss(ids[0], target.clone());
            let l2 = g.softmax_cross_entropy(ids[1], &[1, 0, 2, 1]);
            g.add(l1, l2)
        };
        check_gradients(&build, &[randn(&[3, 2], 30), randn(&[4, 3], 31)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn grad_spatial_broadcast() {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.add_spatial_broadcast(ids[0], ids[1]);
            let z = g.mul(y, y);
            g.mean_all(z)
        };
        check_gradients(&build, &[randn(&[2, 3, 2, 2], 32), randn(&[2, 3], 33)], DEFAULT_EPS, 1e-6);
    }

    #[test]
    fn backward_accumulates_shared_leaf_uses() {
        // One leaf feeding two branches must receive the sum of both grads.
        let mut g = Graph::new();
        let x = g.leaf(randn(&[2, 2], 34), true);
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let s = g.add(a, b);
        let loss = g.mean_all(s);
        let grads = g.backward(loss);
        let gx = grads.get(x).unwrap();
        for v in gx.iter() {
            assert!((v - 5.0 / 4.0).abs() < 1e-12);
        }
    }
}
