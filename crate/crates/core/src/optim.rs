//! Adam with global-norm gradient clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// First and second moments plus a step count per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self { m: alloc::vec![None; n_params], v: alloc::vec![None; n_params], steps: alloc::vec![0; n_params] }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.sum_sq());
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One Adam update of every parameter with a gradient, skipping those for
/// which `frozen` is true. Frozen gradients are dropped before clipping.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, grads: &mut Grads, lr: f64, cfg: &AdamConfig, frozen: &[bool]) -> f64 {
    for (i, &f) in frozen.iter().enumerate() {
        if f {
            grads.clear(ParamId(i));
        }
    }
    let norm = clip_grad_norm(grads, cfg.clip_norm);
    for (id, g) in grads.iter() {
        let i = id.index();
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        let p = params.get_mut(id);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            *pv -= lr * (*mv / c1) / (math::sqrt(*vv / c2) + cfg.eps);
        }
    }
    norm
}
