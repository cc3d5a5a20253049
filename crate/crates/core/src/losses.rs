//! Hybrid segmentation objective: Lovász-Softmax plus focal loss.
//!
//! Both losses take per-voxel class probabilities laid out as K×N (any
//! trailing spatial shape is flattened) and integer labels of length N.
//! Each returns its value together with the gradient with respect to the
//! probabilities, which [`hybrid_loss`] records on the tape.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before the log.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    /// Per-class weights; empty means 1.0 for every class.
    pub focal_alpha: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            focal_alpha: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if self.focal_alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("focal_alpha entries must be > 0".into()));
        }
        Ok(())
    }

    fn alpha(&self, class: usize) -> f64 {
        self.focal_alpha.get(class).copied().unwrap_or(1.0)
    }
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// sorted errors.
///
/// `gt_sorted[k]` says whether the k-th largest error belongs to a
/// ground-truth positive. The returned entries are the first differences of
/// the Jaccard loss along the sorted prefix sets; they are nonnegative and
/// their partial sums reproduce the Jaccard sequence.
pub fn lovasz_grad<T: Real>(gt_sorted: &[bool]) -> Vec<T> {
    let positives = gt_sorted.iter().filter(|&&g| g).count();
    if positives == 0 {
        return vec![T::zero(); gt_sorted.len()];
    }
    let p = positives as f64;
    let mut cum_pos = 0.0;
    let mut cum_neg = 0.0;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                cum_pos += 1.0;
            } else {
                cum_neg += 1.0;
            }
            let intersection = p - cum_pos;
            let union = p + cum_neg;
            let jaccard = 1.0 - intersection / union;
            let step = jaccard - prev;
            prev = jaccard;
            lit(step)
        })
        .collect()
}

fn flat_dims<T: Real>(op: &'static str, probs: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let k = probs.shape()[0];
    let n = probs.len() / k;
    if probs.shape().len() < 2 {
        return Err(Error::shape(op, "rank", "expected K×N probabilities"));
    }
    if labels.len() != n {
        return Err(Error::shape(
            op,
            "voxels",
            format!("{n} probability columns, {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    Ok((k, n))
}

/// Classes that occur in `labels`, ascending.
pub fn present_classes(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut seen = vec![false; classes];
    for &l in labels {
        if l < classes {
            seen[l] = true;
        }
    }
    (0..classes).filter(|&c| seen[c]).collect()
}

/// Lovász-Softmax over all voxels, averaged over the classes present in
/// `labels`. Returns `(loss, ∂loss/∂probs)`.
pub fn lovasz_softmax<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (k, n) = flat_dims("lovasz_softmax", probs, labels)?;
    let p = probs.data();
    let present = present_classes(labels, k);
    let mut grad = vec![T::zero(); p.len()];
    if present.is_empty() {
        return Ok((T::zero(), grad));
    }
    let scale: T = lit(1.0 / present.len() as f64);
    let mut total = T::zero();
    let mut order: Vec<usize> = (0..n).collect();
    let mut errors = vec![T::zero(); n];
    for &c in &present {
        let row = &p[c * n..(c + 1) * n];
        for i in 0..n {
            errors[i] = if labels[i] == c { T::one() - row[i] } else { row[i] };
        }
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        // descending error; stable sort keeps ascending voxel index on ties
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(Ordering::Equal));
        let gt: Vec<bool> = order.iter().map(|&i| labels[i] == c).collect();
        let g = lovasz_grad::<T>(&gt);
        let mut loss_c = T::zero();
        for (rank, &i) in order.iter().enumerate() {
            loss_c += errors[i] * g[rank];
            let dm = g[rank] * scale;
            grad[c * n + i] += if labels[i] == c { -dm } else { dm };
        }
        total += loss_c;
    }
    Ok((total * scale, grad))
}

/// Mean over voxels of `−α_y (1 − p_y)^γ log p_y`. Returns `(loss, ∂loss/∂probs)`.
pub fn focal_loss<T: Real>(probs: &Tensor<T>, labels: &[usize], cfg: &LossConfig) -> Result<(T, Vec<T>)> {
    cfg.validate()?;
    let (_, n) = flat_dims("focal_loss", probs, labels)?;
    let p = probs.data();
    let gamma = cfg.focal_gamma;
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let raw = p[y * n + i].to_f64().unwrap_or(f64::NAN);
        let q = raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let alpha = cfg.alpha(y);
        let one_minus = 1.0 - q;
        let modulator = one_minus.powf(gamma);
        total += -alpha * modulator * q.ln();
        if raw > PROB_FLOOR && raw < 1.0 - PROB_FLOOR {
            let dmod = if gamma == 0.0 {
                0.0
            } else {
                gamma * one_minus.powf(gamma - 1.0) * q.ln()
            };
            let d = alpha * (dmod - modulator / q);
            grad[y * n + i] = lit(d * inv_n);
        }
    }
    Ok((lit(total * inv_n), grad))
}

/// Records `softmax → Lovász-Softmax + focal` on the tape and returns the
/// scalar loss. `logits` is K×… and `labels` follows its voxel order.
pub fn hybrid_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let probs = tape.softmax_channels(logits)?;
    let (lv, lg) = lovasz_softmax(tape.value(probs), labels)?;
    let (fv, fg) = focal_loss(tape.value(probs), labels, cfg)?;
    let lovasz = tape.scalar_fn(probs, lv, lg)?;
    let focal = tape.scalar_fn(probs, fv, fg)?;
    tape.add(lovasz, focal)
}
