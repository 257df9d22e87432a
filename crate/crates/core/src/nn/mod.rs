//! Layer primitives with hand-written backward passes.
//!
//! Activations use a channel-major `(C, N, H, W)` layout so that every
//! convolution is a single matrix product over im2col columns and batch
//! norm statistics are row reductions over contiguous memory.

mod batchnorm;
mod conv;
mod dense;
mod pool;

pub use batchnorm::{BatchNorm2d, BnCache, BnMode};
pub use conv::{Conv2d, ConvCache};
pub use dense::{Dense, DenseCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d, MaxPoolCache};

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// What a tensor is, which decides whether it is trained and regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not learned parameters.
    pub fn is_learned(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
    pub kind: ParamKind,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.value == other.value
    }
}

impl Param {
    pub fn new(value: ArrayD<f64>, kind: ParamKind) -> Self {
        Self {
            value,
            grad: None,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn grad_mut(&mut self) -> &mut ArrayD<f64> {
        let shape = self.value.raw_dim();
        self.grad.get_or_insert_with(|| ArrayD::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.value.as_slice().expect("parameters are contiguous")
    }
}

/// Visitor over `(name, param)` pairs.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

pub(crate) fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let uniform = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || uniform.sample(rng))
}

pub fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `grad` where the forward ReLU output was zero.
pub fn relu_backward(grad: &mut Array4<f64>, output: &Array4<f64>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean categorical cross-entropy and its gradient with respect to logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let probs = softmax(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        // log-softmax directly for stability
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    let scale = 1.0 / n.max(1) as f64;
    grad.mapv_inplace(|g| g * scale);
    (loss * scale, grad)
}

pub(crate) fn zeros1(n: usize) -> ArrayD<f64> {
    Array1::<f64>::zeros(n).into_dyn()
}

pub(crate) fn ones1(n: usize) -> ArrayD<f64> {
    Array1::<f64>::ones(n).into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax(&array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&array![[0.0, 0.0], [2.0, -1.0]], &[0, 1]);
        assert!(loss > 0.0);
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
        assert!(((2f64).ln() / 2.0 + (1.0 + 3f64.exp()).ln() / 2.0 - loss).abs() < 1e-12);
    }
}
