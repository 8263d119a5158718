//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, ParamStore, Tensor};

/// `base_lr * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::invalid("cosine_lr", format!("step {step} outside [0, {total_steps}]")));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// Linear warmup over `warmup` steps, then cosine decay over the rest.
pub fn scheduled_lr(step: u64, total_steps: u64, base_lr: f64, warmup: u64) -> Result<f64> {
    if warmup > 0 && step < warmup {
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    let w = warmup.min(total_steps);
    cosine_lr(step - w, total_steps - w, base_lr).or_else(|_| cosine_lr(step, total_steps, base_lr))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02 }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Element = f32> {
    pub hyper: AdamWParams,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> OptimState<T> {
    /// Zero moments shaped like every parameter of `params`.
    pub fn new(hyper: AdamWParams, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(n, p)| (n.clone(), Tensor::zeros(p.shape().to_vec()))).collect();
        Self { hyper, t: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update: `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
///
/// Parameters without a gradient are left untouched. `decay` selects the
/// parameters that receive weight decay. Arithmetic is carried out in f64.
pub fn adamw_step<T: Element>(
    state: &mut OptimState<T>,
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
    decay: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !state.m.contains_key(name) {
            return Err(Error::MissingParam(format!("optimizer moments for {name}")));
        }
    }
    state.t += 1;
    let AdamWParams { beta1, beta2, eps, weight_decay } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (name, g) in grads {
        let wd = if decay(name) { weight_decay } else { 0.0 };
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g.to_f64();
            let mn = beta1 * m.to_f64() + (1.0 - beta1) * g;
            let vn = beta2 * v.to_f64() + (1.0 - beta2) * g * g;
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
            let old = p.to_f64();
            *p = T::from_f64(old - lr * (mn / bc1) / ((vn / bc2).sqrt() + eps) - lr * wd * old);
        }
    }
    Ok(())
}
