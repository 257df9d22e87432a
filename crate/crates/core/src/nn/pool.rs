use ndarray::{Array2, Array4};

/// Max pooling with `-inf` padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>, keep_cache: bool) -> (Array4<f64>, Option<MaxPoolCache>) {
        let (c, n, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![f64::NEG_INFINITY; c * n * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..c * n {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (plane * oh + oy) * ow + ox;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xs[idx] > out[o] {
                                out[o] = xs[idx];
                                argmax[o] = idx;
                            }
                        }
                    }
                }
            }
        }
        let out = Array4::from_shape_vec((c, n, oh, ow), out).expect("shape");
        (
            out,
            keep_cache.then_some(MaxPoolCache {
                argmax,
                input_dim: (c, n, h, w),
            }),
        )
    }

    pub fn backward(&self, cache: &MaxPoolCache, grad_out: &Array4<f64>) -> Array4<f64> {
        let mut dx = Array4::<f64>::zeros(cache.input_dim);
        let ds = dx.as_slice_mut().expect("standard layout");
        let go = grad_out.as_standard_layout();
        for (g, &i) in go.iter().zip(cache.argmax.iter()) {
            ds[i] += g;
        }
        dx
    }
}

/// `(C, N, H, W)` → `(N, C)` spatial mean.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (c, n, h, w) = x.dim();
    let area = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((n, c));
    for ci in 0..c {
        for ni in 0..n {
            out[[ni, ci]] = x.slice(ndarray::s![ci, ni, .., ..]).sum() / area;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Array2<f64>, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (_, _, h, w) = dim;
    let area = (h * w) as f64;
    Array4::from_shape_fn(dim, |(c, n, _, _)| grad[[n, c]] / area)
}
