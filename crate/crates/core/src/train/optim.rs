use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Gradients, ParameterStore};
use crate::pruning::PruneMask;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.98;
pub const EPSILON: f32 = 1e-8;

/// Adam moments for every parameter plus the shared update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore) -> Self {
        Self::with_hyper(store, BETA1, BETA2, EPSILON)
    }

    pub fn with_hyper(store: &ParameterStore, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = store.iter().map(|(n, p)| (n.to_string(), vec![0.0; p.tensor.numel()])).collect();
        OptimizerState { step: 0, beta1, beta2, eps, m: zeros.clone(), v: zeros }
    }

    /// Zeroes both moments wherever the mask drops an element.
    pub fn apply_mask(&mut self, mask: &PruneMask) {
        for (name, bits) in mask.iter() {
            for table in [&mut self.m, &mut self.v] {
                if let Some(vals) = table.get_mut(name) {
                    for (x, &keep) in vals.iter_mut().zip(bits) {
                        if !keep {
                            *x = 0.0;
                        }
                    }
                }
            }
        }
    }

    pub fn check_matches(&self, store: &ParameterStore) -> Result<()> {
        for (name, p) in store.iter() {
            for (label, table) in [("first", &self.m), ("second", &self.v)] {
                match table.get(name) {
                    Some(t) if t.len() == p.tensor.numel() => {}
                    _ => return Err(Error::Integrity(format!("{label}-moment table does not match parameter `{name}`"))),
                }
            }
        }
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Integrity("optimizer state names parameters the store lacks".into()));
        }
        Ok(())
    }
}

/// Zeroes gradient entries at pruned positions.
pub fn mask_gradients(grads: &mut Gradients, mask: &PruneMask) {
    for (name, bits) in mask.iter() {
        if let Some(g) = grads.get_mut(name) {
            for (x, &keep) in g.iter_mut().zip(bits) {
                if !keep {
                    *x = 0.0;
                }
            }
        }
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f32) -> f32 {
    let sq: f64 = grads.values().flatten().map(|&g| (g as f64) * (g as f64)).sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected Adam update. With a mask, pruned gradients are ignored,
/// their moments stay at zero and the pruned weights are reset to exact zero.
pub fn adam_step(store: &mut ParameterStore, grads: &Gradients, opt: &mut OptimizerState, lr: f32, mask: Option<&PruneMask>) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in `{name}` at index {i}")));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - (opt.beta1 as f64).powi(t);
    let bc2 = 1.0 - (opt.beta2 as f64).powi(t);
    let step_size = (lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    for (name, param) in store.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::Integrity(format!("no gradient for parameter `{name}`")))?;
        let bits = mask.and_then(|mk| mk.get(name));
        let m = opt.m.get_mut(name).ok_or_else(|| Error::Integrity(format!("no moments for `{name}`")))?;
        let v = opt.v.get_mut(name).ok_or_else(|| Error::Integrity(format!("no moments for `{name}`")))?;
        let w = &mut param.tensor.data;
        if g.len() != w.len() || m.len() != w.len() || v.len() != w.len() {
            return Err(Error::Integrity(format!("gradient or moment length mismatch for `{name}`")));
        }
        for i in 0..w.len() {
            if bits.is_some_and(|b| !b[i]) {
                m[i] = 0.0;
                v[i] = 0.0;
                w[i] = 0.0;
                continue;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}
