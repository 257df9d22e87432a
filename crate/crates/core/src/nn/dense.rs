use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{glorot_uniform, join, zeros1, Param, ParamKind, Parameterized};

/// Fully connected layer, `logits = x · Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Array2<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                glorot_uniform(&[out_features, in_features], in_features, out_features, rng),
                ParamKind::Weight,
            ),
            bias: Param::new(zeros1(out_features), ParamKind::Bias),
            in_features,
            out_features,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d")
    }

    fn b(&self) -> ArrayView1<'_, f64> {
        self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d")
    }

    pub fn forward(&self, x: &Array2<f64>, keep_cache: bool) -> (Array2<f64>, Option<DenseCache>) {
        let out = x.dot(&self.w().t()) + &self.b();
        (out, keep_cache.then(|| DenseCache { input: x.clone() }))
    }

    pub fn backward(
        &mut self,
        cache: &DenseCache,
        grad_out: &Array2<f64>,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let dw = grad_out.t().dot(&cache.input);
        let db = grad_out.sum_axis(Axis(0));
        *self.weight.grad_mut() += &dw.view().into_dyn();
        *self.bias.grad_mut() += &db.view().into_dyn();
        need_input_grad.then(|| grad_out.dot(&self.w()))
    }
}

impl Parameterized for Dense {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
