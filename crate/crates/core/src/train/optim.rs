//! AdamW with decoupled weight decay, the one-cycle cosine schedule and
//! global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{c, Element, ParameterStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of completed steps.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `store` that updates and has a
    /// gradient. `decays(name, shape)` selects the parameters that receive
    /// weight decay. Nothing changes when any gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        decays: impl Fn(&str, &[usize]) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Domain(format!("non-finite gradient for {name}; step aborted")));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            if !p.updates() {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
            }
            let decay = if decays(name, p.value.shape()) { lr * self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1t, b2t): (T, T) = (c(b1), c(b2));
            let (lr_t, eps, decay_t): (T, T, T) = (c(lr), c(self.eps), c(decay));
            let (bc1t, bc2t): (T, T) = (c(bc1), c(bc2));
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w -= decay_t * *w;
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                let mh = *mi / bc1t;
                let vh = *vi / bc2t;
                *w -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `peak_lr` over `warmup_steps`, then a cosine
/// decay to 0 at `total_steps`.
pub fn one_cycle_cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return peak_lr;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s: T = c(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
