//! Contrastive query/phrase classification with sigmoid focal loss.

use crate::tensor::{Arr, Tensor};

pub const FOCAL_GAMMA: f32 = 2.0;
pub const FOCAL_ALPHA: f32 = 0.25;

/// Similarity logits between query content `[Q, d]` and pooled phrase
/// embeddings `[P, d]`: `content · phrasesᵀ / √d`.
pub fn contrastive_logits<'t>(content: Tensor<'t>, phrases: Tensor<'t>) -> Tensor<'t> {
    let d = content.dims()[1];
    content.matmul_nt(&phrases).scale(1.0 / (d as f32).sqrt())
}

/// Elementwise sigmoid focal loss against 0/1 targets, same shape as
/// `logits`. Composed from softplus so saturated logits stay stable.
pub fn focal_terms<'t>(logits: Tensor<'t>, targets: &Arr, gamma: f32, alpha: f32) -> Tensor<'t> {
    assert_eq!(logits.value().shape(), targets.shape());
    let t = logits.tape.constant(targets.clone());
    let p = logits.sigmoid();
    let pos = p
        .neg()
        .add_scalar(1.0)
        .powf(gamma)
        .mul(&logits.neg().softplus())
        .scale(alpha);
    let neg = p
        .powf(gamma)
        .mul(&logits.softplus())
        .scale(1.0 - alpha);
    t.mul(&pos).add(&t.neg().add_scalar(1.0).mul(&neg))
}

/// Focal matching cost for assigning a query logit to a positive target:
/// positive-class cost minus the negative-class cost the query would
/// otherwise incur.
pub fn focal_cost(logit: f32, gamma: f32, alpha: f32) -> f32 {
    let p = 1.0 / (1.0 + (-logit as f64).exp());
    let pos = alpha as f64 * (1.0 - p).powf(gamma as f64) * -p.max(1e-12).ln();
    let neg = (1.0 - alpha) as f64 * p.powf(gamma as f64) * -(1.0 - p).max(1e-12).ln();
    (pos - neg) as f32
}
