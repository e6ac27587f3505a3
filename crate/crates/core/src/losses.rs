//! Categorical cross-entropy and the cluster-class mixture loss.
//!
//! Predictions are `B × C` probability rows. Labels are class indices, so the one-hot
//! sum collapses to a single `-log p[i, y_i]` per row. Batch reduction is the mean.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_EPSILON: f64 = 1e-7;

/// Which objective a classifier is trained under.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Cce,
    /// `alpha * CCE(y, p) + (1 - alpha) * CCE(ŷ, p)`.
    CcePlus { alpha: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Cce => Ok(()),
            LossKind::CcePlus { alpha } => check_alpha(alpha),
        }
    }

    /// Weight on the weak-label term.
    pub fn weak_weight(&self) -> f64 {
        match *self {
            LossKind::Cce => 1.0,
            LossKind::CcePlus { alpha } => alpha,
        }
    }

    pub fn needs_cluster_labels(&self) -> bool {
        matches!(self, LossKind::CcePlus { .. })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn rows(p: &Tensor) -> Result<(usize, usize)> {
    match *p.shape() {
        [b, c] => Ok((b, c)),
        _ => Err(Error::shape("probabilities", "[B, C]", p.shape())),
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape("labels", batch, labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelRange { label, classes });
    }
    Ok(())
}

/// Per-row `-log(clamp(p[i, y_i]))`.
pub fn cce_per_instance(labels: &[usize], p: &Tensor) -> Result<Vec<f64>> {
    let (b, c) = rows(p)?;
    check_labels(labels, b, c)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -p.data()[i * c + y].clamp(PROB_EPSILON, 1.0).ln())
        .collect())
}

/// Mean categorical cross-entropy.
pub fn cce(labels: &[usize], p: &Tensor) -> Result<f64> {
    let per = cce_per_instance(labels, p)?;
    if per.is_empty() {
        return Ok(0.0);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mixture of weak-label and cluster-class cross-entropy weighted by `alpha`.
pub fn cce_plus(labels: &[usize], cluster_labels: &[usize], p: &Tensor, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * cce(labels, p)? + (1.0 - alpha) * cce(cluster_labels, p)?)
}

/// Row-wise softmax of `B × C` logits, computed with the max subtracted.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = rows(logits)?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Gradient of the batch-mean `weight * CCE(labels, softmax(z))` with respect to the
/// logits `z`, accumulated into `grad`. Rows whose target probability sits below the
/// clamp contribute nothing, matching the clamped loss exactly.
pub fn accumulate_cce_logit_grad(
    labels: &[usize],
    p: &Tensor,
    weight: f64,
    grad: &mut [f64],
) -> Result<()> {
    let (b, c) = rows(p)?;
    check_labels(labels, b, c)?;
    if weight == 0.0 || b == 0 {
        return Ok(());
    }
    let scale = weight / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &p.data()[i * c..(i + 1) * c];
        if row[y] < PROB_EPSILON {
            continue;
        }
        let g = &mut grad[i * c..(i + 1) * c];
        for (k, (gk, pk)) in g.iter_mut().zip(row).enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            *gk += scale * (pk - target);
        }
    }
    Ok(())
}
