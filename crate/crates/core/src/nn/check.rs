//! Central finite-difference gradient checking.
//!
//! `check_gradients` compares reverse-mode gradients of a scalar-valued graph
//! against central differences computed by rebuilding the graph with
//! perturbed inputs. Used by op-level unit tests and by the gradient-integrity
//! acceptance test.

use super::graph::{Arr, Graph, NodeId};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative disagreement between analytic and numerical gradients, with an
/// absolute floor so near-zero gradients don't blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Evaluates the scalar produced by `build` on the given inputs.
pub fn eval_scalar(build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, inputs: &[Arr]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let out = build(&mut g, &ids);
    *g.value(out).iter().next().unwrap()
}

/// Central finite difference of the scalar w.r.t. one entry of one input.
pub fn numerical_grad_entry(
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    inputs: &[Arr],
    input_idx: usize,
    flat_idx: usize,
    eps: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[input_idx].as_slice_mut().unwrap()[flat_idx] += eps;
    let mut minus = inputs.to_vec();
    minus[input_idx].as_slice_mut().unwrap()[flat_idx] -= eps;
    (eval_scalar(build, &plus) - eval_scalar(build, &minus)) / (2.0 * eps)
}

/// Checks every entry of every input against central differences.
/// Panics with a description of the first failing entry.
pub fn check_gradients(
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    inputs: &[Arr],
    eps: f64,
    tol: f64,
) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out);
    for (ii, id) in ids.iter().enumerate() {
        let zero = Arr::zeros(inputs[ii].raw_dim());
        let analytic = grads.get(*id).unwrap_or(&zero);
        let flat = analytic.as_slice().unwrap();
        for fi in 0..flat.len() {
            let num = numerical_grad_entry(build, inputs, ii, fi, eps);
            let an = flat[fi];
            if an.abs() < 1e-9 && num.abs() < 1e-9 {
                continue;
            }
            let err = rel_err(an, num);
            assert!(
                err <= tol,
                "gradient mismatch input {ii} entry {fi}: analytic {an:.6e} numeric {num:.6e} rel {err:.3e}"
            );
        }
    }
}
