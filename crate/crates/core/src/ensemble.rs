//! Weighted soft voting over model probability outputs, and a grid search
//! for the weights on validation data.

use ndarray::{Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{per_class_accuracy, MetricsError};
use crate::model::{Model, ModelError, ModelSpec};
use crate::seed::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("no models to combine")]
    NoModels,
    #[error("{weights} weights for {models} models")]
    WeightCount { weights: usize, models: usize },
    #[error("weights must be finite and non-negative")]
    NegativeWeight,
    #[error("at least one weight must be positive")]
    ZeroWeights,
    #[error("model {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("grid step {0} outside (0, 1]")]
    BadGridStep(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub weights: Vec<f64>,
}

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, EnsembleError> {
        if weights.is_empty() {
            return Err(EnsembleError::NoModels);
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(EnsembleError::NegativeWeight);
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(EnsembleError::ZeroWeights);
        }
        Ok(Self { weights })
    }

    pub fn uniform(models: usize) -> Result<Self, EnsembleError> {
        Self::new(vec![1.0; models])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `Σ wᵢ·Pᵢ / Σ wᵢ`.
pub fn weighted_vote(probs: &[Array2<f64>], weights: &EnsembleWeights) -> Result<Array2<f64>, EnsembleError> {
    let first = probs.first().ok_or(EnsembleError::NoModels)?;
    if weights.len() != probs.len() {
        return Err(EnsembleError::WeightCount {
            weights: weights.len(),
            models: probs.len(),
        });
    }
    EnsembleWeights::new(weights.weights.clone())?;
    let expected = first.dim();
    for (index, p) in probs.iter().enumerate() {
        if p.dim() != expected {
            return Err(EnsembleError::ShapeMismatch {
                index,
                got: p.dim(),
                expected,
            });
        }
    }
    let total: f64 = weights.weights.iter().sum();
    let mut out = Array2::<f64>::zeros(expected);
    for (p, &w) in probs.iter().zip(&weights.weights) {
        if w != 0.0 {
            out.scaled_add(w / total, p);
        }
    }
    Ok(out)
}

/// Points of the simplex grid as integer step counts, in lexicographic order.
///
/// Each coordinate is a multiple of `step` and the coordinates sum to
/// `⌊1/step⌉·step` (exactly 1 when `step` divides 1).
pub fn simplex_grid(models: usize, step: f64) -> Result<Vec<Vec<usize>>, EnsembleError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(EnsembleError::BadGridStep(step));
    }
    if models == 0 {
        return Err(EnsembleError::NoModels);
    }
    let units = {
        let r = (1.0 / step).round();
        if (r * step - 1.0).abs() < 1e-9 {
            r as usize
        } else {
            (1.0 / step).floor() as usize
        }
    };
    fn fill(prefix: &mut Vec<usize>, left: usize, slots: usize, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            fill(prefix, left - v, slots - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::new(), units, models, &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSearch {
    pub weights: EnsembleWeights,
    /// Average per-class top-1 accuracy of the chosen vote.
    pub metric: f64,
    pub evaluated: usize,
    pub grid_step: f64,
}

/// Exhaustive search over the simplex grid for the weights maximizing
/// average per-class top-1 accuracy. Ties go to the lexicographically
/// smallest weight vector.
pub fn search_weights(
    val_probs: &[Array2<f64>],
    labels: &[usize],
    grid_step: f64,
) -> Result<WeightSearch, EnsembleError> {
    if val_probs.is_empty() {
        return Err(EnsembleError::NoModels);
    }
    if labels.is_empty() {
        return Err(EnsembleError::EmptyValidation);
    }
    let grid = simplex_grid(val_probs.len(), grid_step)?;
    let scores: Vec<Result<f64, EnsembleError>> = grid
        .par_iter()
        .map(|counts| {
            let w = EnsembleWeights::new(counts.iter().map(|&c| c as f64 * grid_step).collect())?;
            let vote = weighted_vote(val_probs, &w)?;
            Ok(per_class_accuracy(vote.view(), labels)?.macro_accuracy)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        let s = s?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, metric) = best.expect("grid is non-empty");
    Ok(WeightSearch {
        weights: EnsembleWeights::new(grid[i].iter().map(|&c| c as f64 * grid_step).collect())?,
        metric,
        evaluated: grid.len(),
        grid_step,
    })
}

/// Anything that maps an `N×H×W×3` batch to class probabilities.
pub trait Predictor: Sync {
    fn class_count(&self) -> usize;
    fn predict(&self, batch: &Array4<f64>) -> Result<Array2<f64>, ModelError>;
}

impl Predictor for Model {
    fn class_count(&self) -> usize {
        Model::class_count(self)
    }

    fn predict(&self, batch: &Array4<f64>) -> Result<Array2<f64>, ModelError> {
        Model::predict(self, batch)
    }
}

/// Models combined by weighted soft voting.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Model>,
    pub weights: EnsembleWeights,
}

impl Ensemble {
    pub fn new(members: Vec<Model>, weights: EnsembleWeights) -> Result<Self, EnsembleError> {
        let first = members.first().ok_or(EnsembleError::NoModels)?;
        if weights.len() != members.len() {
            return Err(EnsembleError::WeightCount {
                weights: weights.len(),
                models: members.len(),
            });
        }
        for (index, m) in members.iter().enumerate() {
            if m.class_count() != first.class_count() || m.spec().input_size != first.spec().input_size {
                return Err(EnsembleError::ShapeMismatch {
                    index,
                    got: (m.class_count(), m.spec().input_size.0),
                    expected: (first.class_count(), first.spec().input_size.0),
                });
            }
        }
        Ok(Self { members, weights })
    }
}

impl Predictor for Ensemble {
    fn class_count(&self) -> usize {
        self.members[0].class_count()
    }

    fn predict(&self, batch: &Array4<f64>) -> Result<Array2<f64>, ModelError> {
        let probs = self
            .members
            .par_iter()
            .map(|m| m.predict(batch))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(weighted_vote(&probs, &self.weights).expect("members validated at construction"))
    }
}

/// Specs for `count` voting members derived from `base`: member 0 is
/// `base`; others use a different init seed and a scaled head width.
pub fn member_specs(base: &ModelSpec, count: usize) -> Vec<ModelSpec> {
    const SCALE: [(usize, usize); 3] = [(1, 1), (3, 4), (5, 4)];
    (0..count)
        .map(|i| {
            let mut spec = base.clone();
            if i > 0 {
                let (num, den) = SCALE[i % SCALE.len()];
                spec.init_seed = derive_seed(base.init_seed, &[b"voting-member", &(i as u64).to_le_bytes()]);
                spec.head.pointwise_channels = (base.head.pointwise_channels * num / den).max(1);
                spec.head.conv_channels = (base.head.conv_channels * num / den).max(1);
            }
            spec
        })
        .collect()
}
