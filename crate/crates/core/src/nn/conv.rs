use ndarray::{Array2, Array4, ArrayView2, Ix4};
use rand::Rng;

use super::{he_normal, join, Param, ParamKind, Parameterized};

/// 2-D convolution without bias (every convolution here feeds a batch norm).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    /// im2col columns, `(in·k·k, N·OH·OW)`; `None` for pointwise stride-1
    /// convolutions where the input itself is the column matrix.
    cols: Option<Array2<f64>>,
    input: Option<Array4<f64>>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(
                he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
                ParamKind::Weight,
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// "Same" padding for odd kernels.
    pub fn same<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(in_channels, out_channels, kernel, stride, kernel / 2, rng)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<f64>, keep_cache: bool) -> (Array4<f64>, Option<ConvCache>) {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.output_hw(h, w);
        let wm = self.weight_matrix();
        let (out, cache) = if self.is_pointwise() {
            let x = x.as_standard_layout();
            let cols = x.view().into_shape_with_order((c, n * h * w)).expect("contiguous");
            let out = wm.dot(&cols);
            let cache = keep_cache.then(|| ConvCache {
                cols: None,
                input: Some(x.into_owned()),
                input_dim: (c, n, h, w),
            });
            (out, cache)
        } else {
            let cols = self.im2col(x, oh, ow);
            let out = wm.dot(&cols);
            let cache = keep_cache.then(|| ConvCache {
                cols: Some(cols),
                input: None,
                input_dim: (c, n, h, w),
            });
            (out, cache)
        };
        let out = out
            .into_shape_with_order((self.out_channels, n, oh, ow))
            .expect("output shape");
        (out, cache)
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        grad_out: &Array4<f64>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (c, n, h, w) = cache.input_dim;
        let (_, _, oh, ow) = grad_out.dim();
        let go = grad_out.as_standard_layout();
        let go = go
            .view()
            .into_shape_with_order((self.out_channels, n * oh * ow))
            .expect("contiguous grad");
        let dw = match (&cache.cols, &cache.input) {
            (Some(cols), _) => go.dot(&cols.t()),
            (None, Some(input)) => {
                let cols = input.view().into_shape_with_order((c, n * h * w)).expect("contiguous");
                go.dot(&cols.t())
            }
            (None, None) => unreachable!("conv cache holds columns or input"),
        };
        let dw = dw
            .into_shape_with_order((self.out_channels, self.in_channels, self.kernel, self.kernel))
            .expect("weight shape");
        {
            let g = self.weight.grad_mut();
            let mut g = g.view_mut().into_dimensionality::<Ix4>().expect("4-d weight");
            g += &dw;
        }
        if !need_input_grad {
            return None;
        }
        let dcols = self.weight_matrix().t().dot(&go);
        if self.is_pointwise() {
            return Some(dcols.into_shape_with_order((c, n, h, w)).expect("input shape"));
        }
        Some(self.col2im(&dcols, (c, n, h, w), oh, ow))
    }

    fn im2col(&self, x: &Array4<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (c, n, h, w) = x.dim();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ncols = n * oh * ow;
        let mut cols = vec![0.0; c * k * k * ncols];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for ni in 0..n {
                        let plane = &xs[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                        for oy in 0..oh {
                            let iy = oy as isize * s + ki as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let base = (ni * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kj as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, ncols), cols).expect("cols shape")
    }

    fn col2im(&self, dcols: &Array2<f64>, dim: (usize, usize, usize, usize), oh: usize, ow: usize) -> Array4<f64> {
        let (c, n, h, w) = dim;
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let ncols = n * oh * ow;
        let dcols = dcols.as_standard_layout();
        let ds = dcols.as_slice().expect("standard layout");
        let mut dx = vec![0.0; c * n * h * w];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &ds[row * ncols..(row + 1) * ncols];
                    for ni in 0..n {
                        let plane = &mut dx[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                        for oy in 0..oh {
                            let iy = oy as isize * s + ki as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (ni * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kj as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy as usize * w + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((c, n, h, w), dx).expect("input shape")
    }
}

impl Parameterized for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}
