//! Top-k accuracy, per-class accuracy and confusion matrices.
//!
//! Ranking ties are broken by class index: the lower index ranks first.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("{probs} probability rows but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("k = {k} outside 1..={classes}")]
    KOutOfRange { k: usize, classes: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{names} class names for {classes} probability columns")]
    ClassNames { names: usize, classes: usize },
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] || (row[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Zero-based rank of `label` in `row` under the tie rule.
pub fn rank_of(row: &[f64], label: usize) -> usize {
    let p = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

/// Class indices ordered by decreasing probability, ties by index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn check(probs: &ArrayView2<f64>, labels: &[usize]) -> Result<usize, MetricsError> {
    let (n, c) = probs.dim();
    if n != labels.len() {
        return Err(MetricsError::LengthMismatch {
            probs: n,
            labels: labels.len(),
        });
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(MetricsError::LabelOutOfRange { label, classes: c });
    }
    Ok(c)
}

fn rows<'a>(probs: &'a ArrayView2<'a, f64>) -> impl Iterator<Item = Vec<f64>> + 'a {
    probs.rows().into_iter().map(|r| r.to_vec())
}

pub fn topk_accuracy(probs: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    let c = check(&probs, labels)?;
    if k == 0 || k > c {
        return Err(MetricsError::KOutOfRange { k, classes: c });
    }
    let hits = rows(&probs).zip(labels).filter(|(row, &y)| rank_of(row, y) < k).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassAccuracy {
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// Unweighted mean over classes with samples.
    pub macro_accuracy: f64,
}

pub fn per_class_accuracy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<PerClassAccuracy, MetricsError> {
    let c = check(&probs, labels)?;
    let mut correct = vec![0usize; c];
    let mut support = vec![0usize; c];
    for (row, &y) in rows(&probs).zip(labels) {
        support[y] += 1;
        if argmax(&row) == y {
            correct[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&support)
        .map(|(&k, &s)| (s > 0).then(|| k as f64 / s as f64))
        .collect();
    Ok(PerClassAccuracy {
        macro_accuracy: macro_mean(per_class.iter().flatten().copied()),
        per_class,
        support,
    })
}

/// Unweighted mean; 0 for an empty iterator.
pub fn macro_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
pub fn confusion_matrix(probs: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<Vec<usize>>, MetricsError> {
    let c = check(&probs, labels)?;
    let mut m = vec![vec![0usize; c]; c];
    for (row, &y) in rows(&probs).zip(labels) {
        m[y][argmax(&row)] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    /// k → accuracy for k = 1..=min(3, classes).
    pub topk: BTreeMap<usize, f64>,
    /// Accuracy of every class that has samples.
    pub per_class: BTreeMap<String, f64>,
    pub support: BTreeMap<String, usize>,
    /// Unweighted mean of `per_class`.
    pub macro_accuracy: f64,
    /// Sample-weighted top-1 accuracy.
    pub micro_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub sample_count: usize,
}

pub fn evaluate(
    probs: ArrayView2<f64>,
    labels: &[usize],
    class_names: &[String],
) -> Result<EvaluationReport, MetricsError> {
    let c = check(&probs, labels)?;
    if class_names.len() != c {
        return Err(MetricsError::ClassNames {
            names: class_names.len(),
            classes: c,
        });
    }
    let mut topk = BTreeMap::new();
    for k in 1..=c.min(3) {
        topk.insert(k, topk_accuracy(probs, labels, k)?);
    }
    let pc = per_class_accuracy(probs, labels)?;
    let mut per_class = BTreeMap::new();
    let mut support = BTreeMap::new();
    for (i, name) in class_names.iter().enumerate() {
        if let Some(a) = pc.per_class[i] {
            per_class.insert(name.clone(), a);
            support.insert(name.clone(), pc.support[i]);
        }
    }
    Ok(EvaluationReport {
        class_names: class_names.to_vec(),
        micro_accuracy: topk[&1],
        topk,
        per_class,
        support,
        macro_accuracy: pc.macro_accuracy,
        confusion: confusion_matrix(probs, labels)?,
        sample_count: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_checked_topk() {
        let p = array![[0.5, 0.3, 0.2]];
        assert_eq!(topk_accuracy(p.view(), &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(p.view(), &[1], 2).unwrap(), 1.0);
        assert_eq!(
            topk_accuracy(p.view(), &[1], 4),
            Err(MetricsError::KOutOfRange { k: 4, classes: 3 })
        );
        assert_eq!(
            topk_accuracy(p.view(), &[1, 2], 1),
            Err(MetricsError::LengthMismatch { probs: 1, labels: 2 })
        );
    }

    #[test]
    fn ties_favor_lower_index() {
        let p = array![[0.4, 0.4, 0.2]];
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(topk_accuracy(p.view(), &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(p.view(), &[1], 1).unwrap(), 0.0);
        assert_eq!(ranking(&[0.2, 0.4, 0.4]), vec![1, 2, 0]);
    }

    #[test]
    fn single_class_macro_and_confusion() {
        let p = array![[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]];
        let pc = per_class_accuracy(p.view(), &[0, 0, 0]).unwrap();
        assert!((pc.macro_accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(pc.per_class[1], None);
        assert_eq!(
            confusion_matrix(p.view(), &[0, 0, 0]).unwrap(),
            vec![vec![2, 1], vec![0, 0]]
        );
    }

    #[test]
    fn empty_is_an_error() {
        let p = ndarray::Array2::<f64>::zeros((0, 3));
        assert_eq!(topk_accuracy(p.view(), &[], 1), Err(MetricsError::Empty));
    }
}
