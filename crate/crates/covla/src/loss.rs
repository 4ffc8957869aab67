//! Hybrid training objective: batch cross-entropy plus a squared-distance
//! anchor pulling pooled fused features toward those of a frozen
//! initialization snapshot.

use thiserror::Error;

use crate::data::MultimodalPost;
use crate::model::{self, ModelError, ModelParams};
use crate::tape::PROB_FLOOR;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch size mismatch: {lhs} predictions vs {rhs} labels")]
    BatchMismatch { lhs: usize, rhs: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("feature dimension mismatch: {lhs:?} vs {rhs:?}")]
    DimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
}

/// Mean negative log probability of the true labels. Probabilities are
/// floored at 1e-12 inside the log.
pub fn cross_entropy(probs: &[Tensor], labels: &[usize]) -> Result<f64, LossError> {
    if probs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(LossError::BatchMismatch {
            lhs: probs.len(),
            rhs: labels.len(),
        });
    }
    let mut total = 0.0;
    for (p, &label) in probs.iter().zip(labels) {
        let classes = p.numel();
        if label >= classes {
            return Err(LossError::LabelOutOfRange { label, classes });
        }
        total += -p.data()[label].max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Mean squared Euclidean distance between pooled features and their
/// reference counterparts.
pub fn kd_loss(features: &[Tensor], references: &[Tensor]) -> Result<f64, LossError> {
    if features.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if features.len() != references.len() {
        return Err(LossError::BatchMismatch {
            lhs: features.len(),
            rhs: references.len(),
        });
    }
    let mut total = 0.0;
    for (f, r) in features.iter().zip(references) {
        if f.shape() != r.shape() {
            return Err(LossError::DimMismatch {
                lhs: f.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        total += f
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / features.len() as f64)
}

pub fn total_loss(ce: f64, kd: f64, lambda: f64) -> f64 {
    ce + lambda * kd
}

/// Frozen copy of a model taken at initialization; provides reference
/// pooled features for the distillation anchor and is never updated.
#[derive(Debug, Clone)]
pub struct KdReference {
    params: ModelParams,
}

impl KdReference {
    pub fn snapshot(model: &ModelParams) -> Self {
        KdReference {
            params: model.clone(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Pooled fused feature of the snapshot on one post, without any
    /// gradient bookkeeping.
    pub fn pooled_feature(&self, post: &MultimodalPost) -> Result<Tensor, ModelError> {
        Ok(model::forward(&self.params, post)?.pooled)
    }
}
