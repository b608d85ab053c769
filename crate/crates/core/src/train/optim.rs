use serde::{Deserialize, Serialize};

use crate::diffcalc::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::contract("optimizer state does not match the parameter count"));
        }
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Shape {
                    name: p.name.clone(),
                    found: m.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// One AdamW update from the gradients held in `store`. Decay is decoupled:
/// each parameter is first scaled by `1 - lr * weight_decay`. Any non-finite
/// gradient aborts the step before anything changes.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, hp: &AdamW, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    state.check(store)?;
    if store.iter().any(|p| !p.grad.is_finite()) {
        return Err(Error::Numeric { op: "adamw_step" });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let (value, grad) = (p.value.data_mut(), p.grad.data());
        for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            *x = *x * decay - lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}
