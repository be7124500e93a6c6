//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::graph::Arr;
use super::params::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Only trainable parameters with a gradient move;
    /// frozen parameters are never touched (not even by weight decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, grad) in grads {
            let param = store.get_mut(name);
            if !param.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |mv, gv| *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv);
            v.zip_mut_with(grad, |vv, gv| *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv);
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            let wd = self.cfg.weight_decay;
            ndarray::Zip::from(&mut param.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}
