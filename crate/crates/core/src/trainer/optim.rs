//! Adam with decoupled weight decay and a frozen-parameter set.

use std::collections::{BTreeMap, BTreeSet};

use crate::netarch::ModelState;
use crate::real::{lit, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moments and the number of updates taken by one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, Moments<T>>,
    pub frozen: BTreeSet<String>,
}

impl<T: Real> Default for OptimizerState<T> {
    fn default() -> Self {
        OptimizerState {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            moments: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }
}

/// Normalization affines and output heads are not decayed.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with("/gain") || name.ends_with("/bias") || name.rsplit('/').nth(1).is_some_and(|s| s.starts_with("head"))
}

/// One Adam update of `param` in place.
///
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + weight_decay·θ)` with bias-corrected moments.
pub fn adam_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    lr: f64,
    weight_decay: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) {
    state.t += 1;
    let b1: T = lit(beta1);
    let b2: T = lit(beta2);
    let c1: T = lit(1.0 - beta1.powi(state.t.min(i32::MAX as u64) as i32));
    let c2: T = lit(1.0 - beta2.powi(state.t.min(i32::MAX as u64) as i32));
    let lr: T = lit(lr);
    let wd: T = lit(weight_decay);
    let eps: T = lit(eps);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
    }
}

impl<T: Real> OptimizerState<T> {
    pub fn new(frozen: BTreeSet<String>) -> Self {
        OptimizerState {
            frozen,
            ..Default::default()
        }
    }

    /// Updates every parameter that holds a gradient and is not frozen,
    /// then clears all gradients. Parameters without a gradient (other
    /// domains' partitions) are left alone, moments included.
    pub fn step(&mut self, model: &mut ModelState<T>, lr: f64, weight_decay: f64) {
        let hyper = (self.beta1, self.beta2, self.eps);
        let frozen = &self.frozen;
        let model_frozen = model.frozen().clone();
        let moments = &mut self.moments;
        model.for_each_param_mut(|name, p| {
            let Some(grad) = p.take_grad() else { return };
            if frozen.contains(name) || model_frozen.contains(name) {
                return;
            }
            let state = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
                t: 0,
            });
            let wd = if decay_exempt(name) { 0.0 } else { weight_decay };
            adam_update(p.data_mut(), &grad, state, lr, wd, hyper);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [1.0f64];
        let mut s = Moments {
            m: vec![0.0],
            v: vec![0.0],
            t: 0,
        };
        adam_update(&mut p, &[0.3], &mut s, 1e-3, 0.0, (BETA1, BETA2, ADAM_EPS));
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
        let mut q = [2.0f64];
        let mut fresh = Moments {
            m: vec![0.0],
            v: vec![0.0],
            t: 0,
        };
        adam_update(&mut q, &[0.0], &mut fresh, 1e-3, 0.0, (BETA1, BETA2, ADAM_EPS));
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn exemptions() {
        assert!(decay_exempt("domain/a/enc0/norm1/gain"));
        assert!(decay_exempt("domain/a/head0/weight"));
        assert!(!decay_exempt("shared/enc0/conv1/pointwise"));
    }
}
