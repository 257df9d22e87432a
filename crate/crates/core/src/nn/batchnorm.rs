use ndarray::{Array1, Array2, Array4, ArrayView1, Axis, Ix1};

use super::{join, ones1, zeros1, Param, ParamKind, Parameterized};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which statistics normalize the activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running averages are updated afterwards.
    Batch,
    /// Stored running statistics (inference, or a frozen layer).
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: BnMode,
    /// Normalized input, `(C, M)`; only kept in batch mode.
    xhat: Option<Array2<f64>>,
    inv_std: Array1<f64>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
    dim: (usize, usize, usize, usize),
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ones1(channels), ParamKind::Scale),
            beta: Param::new(zeros1(channels), ParamKind::Shift),
            running_mean: Param::new(zeros1(channels), ParamKind::RunningMean),
            running_var: Param::new(ones1(channels), ParamKind::RunningVar),
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    fn vec<'a>(p: &'a Param) -> ArrayView1<'a, f64> {
        p.value.view().into_dimensionality::<Ix1>().expect("1-d")
    }

    pub fn forward(&self, x: &Array4<f64>, mode: BnMode, keep_cache: bool) -> (Array4<f64>, Option<BnCache>) {
        let dim = x.dim();
        let (c, n, h, w) = dim;
        let m = n * h * w;
        let x = x.as_standard_layout();
        let x2 = x.view().into_shape_with_order((c, m)).expect("contiguous");
        let gamma = Self::vec(&self.gamma);
        let beta = Self::vec(&self.beta);
        let (mean, var) = match mode {
            BnMode::Batch => {
                let mean = x2.mean_axis(Axis(1)).expect("non-empty batch");
                let var = Array1::from_shape_fn(c, |i| {
                    let mu = mean[i];
                    x2.row(i).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64
                });
                (mean, var)
            }
            BnMode::Running => (
                Self::vec(&self.running_mean).to_owned(),
                Self::vec(&self.running_var).to_owned(),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = Array2::<f64>::zeros((c, m));
        for i in 0..c {
            let (mu, is) = (mean[i], inv_std[i]);
            xhat.row_mut(i).zip_mut_with(&x2.row(i), |o, &v| *o = (v - mu) * is);
        }
        let mut y = xhat.clone();
        for i in 0..c {
            let (g, b) = (gamma[i], beta[i]);
            y.row_mut(i).mapv_inplace(|v| v * g + b);
        }
        let cache = keep_cache.then(|| BnCache {
            mode,
            xhat: (mode == BnMode::Batch).then_some(xhat),
            inv_std,
            batch_mean: (mode == BnMode::Batch).then(|| mean.clone()),
            batch_var: (mode == BnMode::Batch).then(|| var.clone()),
            dim,
        });
        (y.into_shape_with_order(dim).expect("shape"), cache)
    }

    /// Folds the cached batch statistics into the running averages
    /// (unbiased variance, as the running estimate is used at inference).
    pub fn update_running(&mut self, cache: &BnCache) {
        let (Some(mean), Some(var)) = (&cache.batch_mean, &cache.batch_var) else {
            return;
        };
        let (_, n, h, w) = cache.dim;
        let m = (n * h * w) as f64;
        let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for (r, b) in self.running_mean.value.iter_mut().zip(mean.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.running_var.value.iter_mut().zip(var.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction;
        }
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Array4<f64>, need_input_grad: bool) -> Option<Array4<f64>> {
        let (c, n, h, w) = cache.dim;
        let m = n * h * w;
        let go = grad_out.as_standard_layout();
        let go = go.view().into_shape_with_order((c, m)).expect("contiguous");
        let gamma = Self::vec(&self.gamma).to_owned();
        match cache.mode {
            BnMode::Batch => {
                let xhat = cache.xhat.as_ref().expect("batch cache keeps xhat");
                let dbeta = go.sum_axis(Axis(1));
                let dgamma = (&go * xhat).sum_axis(Axis(1));
                self.accumulate(&dgamma, &dbeta);
                if !need_input_grad {
                    return None;
                }
                let mut dx = Array2::<f64>::zeros((c, m));
                let mf = m as f64;
                for i in 0..c {
                    let k = gamma[i] * cache.inv_std[i] / mf;
                    let (sb, sg) = (dbeta[i], dgamma[i]);
                    ndarray::Zip::from(dx.row_mut(i))
                        .and(go.row(i))
                        .and(xhat.row(i))
                        .for_each(|d, &g, &xh| *d = k * (mf * g - sb - xh * sg));
                }
                Some(dx.into_shape_with_order(cache.dim).expect("shape"))
            }
            BnMode::Running => {
                // running-mode layers are frozen: no parameter gradients
                if !need_input_grad {
                    return None;
                }
                let mut dx = go.to_owned();
                for i in 0..c {
                    let k = gamma[i] * cache.inv_std[i];
                    dx.row_mut(i).mapv_inplace(|v| v * k);
                }
                Some(dx.into_shape_with_order(cache.dim).expect("shape"))
            }
        }
    }

    fn accumulate(&mut self, dgamma: &Array1<f64>, dbeta: &Array1<f64>) {
        *self.gamma.grad_mut() += &dgamma.view().into_dyn();
        *self.beta.grad_mut() += &dbeta.view().into_dyn();
    }
}

impl Parameterized for BatchNorm2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Array4<f64> {
        Array4::from_shape_fn((2, 3, 2, 2), |(c, n, y, x)| {
            ((c * 5 + n * 3 + y * 2 + x) % 7) as f64 * 0.3 - 0.5 + c as f64
        })
    }

    #[test]
    fn batch_mode_normalizes() {
        let bn = BatchNorm2d::new(2);
        let (y, _) = bn.forward(&sample(), BnMode::Batch, false);
        let y2 = y.into_shape_with_order((2, 12)).unwrap();
        for row in y2.rows() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value[[0]] = 1.5;
        bn.beta.value[[1]] = -0.2;
        let x = sample();
        let g = Array4::from_shape_fn(x.dim(), |(a, b, c, d)| ((a * 3 + b + 2 * c + d) % 4) as f64 - 1.3);
        let (_, cache) = bn.forward(&x, BnMode::Batch, true);
        let dx = bn.backward(cache.as_ref().unwrap(), &g, true).unwrap();
        let loss = |x: &Array4<f64>| (&bn.forward(x, BnMode::Batch, false).0 * &g).sum();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 2, 1, 0), (0, 1, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn running_update_moves_toward_batch() {
        let mut bn = BatchNorm2d::new(2);
        let (_, cache) = bn.forward(&sample(), BnMode::Batch, true);
        bn.update_running(cache.as_ref().unwrap());
        assert!(bn.running_mean.value[[1]] > 0.0);
        let before = bn.clone();
        let (_, cache) = bn.forward(&sample(), BnMode::Running, true);
        bn.update_running(cache.as_ref().unwrap());
        assert_eq!(before, bn);
    }
}
