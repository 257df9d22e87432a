use ndarray::Array4;
use rand::Rng;

use crate::nn::{
    relu_backward, relu_inplace, BatchNorm2d, BnCache, BnMode, Conv2d, ConvCache, MaxPool2d, MaxPoolCache, Param,
    Parameterized,
};

/// Convolution → batch norm → optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct ConvBnActCache {
    conv: ConvCache,
    bn: BnCache,
    output: Option<Array4<f64>>,
}

impl ConvBnAct {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::same(in_ch, out_ch, kernel, stride, rng),
            bn: BatchNorm2d::new(out_ch),
            relu,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn forward(&self, x: &Array4<f64>, mode: BnMode, keep: bool) -> (Array4<f64>, Option<ConvBnActCache>) {
        let (h, conv_cache) = self.conv.forward(x, keep);
        let (mut y, bn_cache) = self.bn.forward(&h, mode, keep);
        if self.relu {
            relu_inplace(&mut y);
        }
        let cache = keep.then(|| ConvBnActCache {
            conv: conv_cache.expect("kept"),
            bn: bn_cache.expect("kept"),
            output: self.relu.then(|| y.clone()),
        });
        (y, cache)
    }

    pub fn update_running(&mut self, cache: &ConvBnActCache) {
        self.bn.update_running(&cache.bn);
    }

    pub fn backward(
        &mut self,
        cache: &ConvBnActCache,
        grad: Array4<f64>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let mut grad = grad;
        if let Some(out) = &cache.output {
            relu_backward(&mut grad, out);
        }
        let g = self.bn.backward(&cache.bn, &grad, true).expect("requested");
        self.conv.backward(&cache.conv, &g, need_input_grad)
    }
}

impl Parameterized for ConvBnAct {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

/// Residual bottleneck (1×1 reduce, 3×3 with stride, 1×1 expand) that may
/// be cut after its first or second activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub reduce: ConvBnAct,
    pub spatial: Option<ConvBnAct>,
    pub expand: Option<ConvBnAct>,
    pub shortcut: Option<ConvBnAct>,
    /// Number of activations executed (1–3); 3 means the full residual block.
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache {
    reduce: ConvBnActCache,
    spatial: Option<ConvBnActCache>,
    expand: Option<ConvBnActCache>,
    shortcut: Option<ConvBnActCache>,
    output: Option<Array4<f64>>,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        mid: usize,
        out: usize,
        stride: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let reduce = ConvBnAct::new(in_ch, mid, 1, 1, true, rng);
        let spatial = (depth >= 2).then(|| ConvBnAct::new(mid, mid, 3, stride, true, rng));
        let expand = (depth >= 3).then(|| ConvBnAct::new(mid, out, 1, 1, false, rng));
        let shortcut =
            (depth >= 3 && (in_ch != out || stride != 1)).then(|| ConvBnAct::new(in_ch, out, 1, stride, false, rng));
        Self {
            reduce,
            spatial,
            expand,
            shortcut,
            depth,
        }
    }

    pub fn out_channels(&self) -> usize {
        match (&self.expand, &self.spatial) {
            (Some(e), _) => e.conv.out_channels,
            (None, Some(s)) => s.conv.out_channels,
            (None, None) => self.reduce.conv.out_channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count()
            + self.spatial.as_ref().map_or(0, |u| u.param_count())
            + self.expand.as_ref().map_or(0, |u| u.param_count())
            + self.shortcut.as_ref().map_or(0, |u| u.param_count())
    }

    pub fn forward(&self, x: &Array4<f64>, mode: BnMode, keep: bool) -> (Array4<f64>, Option<BottleneckCache>) {
        let (h, reduce) = self.reduce.forward(x, mode, keep);
        let Some(spatial_unit) = &self.spatial else {
            return (
                h,
                keep.then(|| BottleneckCache {
                    reduce: reduce.unwrap(),
                    spatial: None,
                    expand: None,
                    shortcut: None,
                    output: None,
                }),
            );
        };
        let (h, spatial) = spatial_unit.forward(&h, mode, keep);
        let Some(expand_unit) = &self.expand else {
            return (
                h,
                keep.then(|| BottleneckCache {
                    reduce: reduce.unwrap(),
                    spatial,
                    expand: None,
                    shortcut: None,
                    output: None,
                }),
            );
        };
        let (mut y, expand) = expand_unit.forward(&h, mode, keep);
        let shortcut = match &self.shortcut {
            Some(unit) => {
                let (s, cache) = unit.forward(x, mode, keep);
                y += &s;
                cache
            }
            None => {
                y += x;
                None
            }
        };
        relu_inplace(&mut y);
        let cache = keep.then(|| BottleneckCache {
            reduce: reduce.unwrap(),
            spatial,
            expand,
            shortcut,
            output: Some(y.clone()),
        });
        (y, cache)
    }

    pub fn update_running(&mut self, cache: &BottleneckCache) {
        self.reduce.update_running(&cache.reduce);
        if let (Some(u), Some(c)) = (self.spatial.as_mut(), cache.spatial.as_ref()) {
            u.update_running(c);
        }
        if let (Some(u), Some(c)) = (self.expand.as_mut(), cache.expand.as_ref()) {
            u.update_running(c);
        }
        if let (Some(u), Some(c)) = (self.shortcut.as_mut(), cache.shortcut.as_ref()) {
            u.update_running(c);
        }
    }

    pub fn backward(
        &mut self,
        cache: &BottleneckCache,
        grad: Array4<f64>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let mut grad = grad;
        let mut skip_grad = None;
        if let Some(out) = &cache.output {
            relu_backward(&mut grad, out);
            skip_grad = Some(match (self.shortcut.as_mut(), cache.shortcut.as_ref()) {
                (Some(unit), Some(c)) => unit.backward(c, grad.clone(), need_input_grad),
                _ => need_input_grad.then(|| grad.clone()),
            });
            let expand = self.expand.as_mut().expect("full block");
            grad = expand
                .backward(cache.expand.as_ref().expect("cached"), grad, true)
                .expect("requested");
        }
        if let (Some(unit), Some(c)) = (self.spatial.as_mut(), cache.spatial.as_ref()) {
            grad = unit.backward(c, grad, true).expect("requested");
        }
        let dx = self.reduce.backward(&cache.reduce, grad, need_input_grad);
        match (dx, skip_grad.flatten()) {
            (Some(mut dx), Some(skip)) => {
                dx += &skip;
                Some(dx)
            }
            (dx, _) => dx,
        }
    }
}

impl Parameterized for Bottleneck {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.reduce.visit(&format!("{prefix}.reduce"), f);
        if let Some(u) = &self.spatial {
            u.visit(&format!("{prefix}.spatial"), f);
        }
        if let Some(u) = &self.expand {
            u.visit(&format!("{prefix}.expand"), f);
        }
        if let Some(u) = &self.shortcut {
            u.visit(&format!("{prefix}.shortcut"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.reduce.visit_mut(&format!("{prefix}.reduce"), f);
        if let Some(u) = &mut self.spatial {
            u.visit_mut(&format!("{prefix}.spatial"), f);
        }
        if let Some(u) = &mut self.expand {
            u.visit_mut(&format!("{prefix}.expand"), f);
        }
        if let Some(u) = &mut self.shortcut {
            u.visit_mut(&format!("{prefix}.shortcut"), f);
        }
    }
}

/// Input stem: convolution, batch norm, ReLU, optional max pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub unit: ConvBnAct,
    pub pool: Option<MaxPool2d>,
}

#[derive(Clone, Debug)]
pub struct StemCache {
    unit: ConvBnActCache,
    pool: Option<MaxPoolCache>,
}

impl Stem {
    pub fn forward(&self, x: &Array4<f64>, mode: BnMode, keep: bool) -> (Array4<f64>, Option<StemCache>) {
        let (h, unit) = self.unit.forward(x, mode, keep);
        match &self.pool {
            Some(pool) => {
                let (y, pc) = pool.forward(&h, keep);
                (
                    y,
                    keep.then(|| StemCache {
                        unit: unit.unwrap(),
                        pool: pc,
                    }),
                )
            }
            None => (
                h,
                keep.then(|| StemCache {
                    unit: unit.unwrap(),
                    pool: None,
                }),
            ),
        }
    }

    pub fn update_running(&mut self, cache: &StemCache) {
        self.unit.update_running(&cache.unit);
    }

    pub fn backward(&mut self, cache: &StemCache, grad: Array4<f64>) {
        let grad = match (&self.pool, &cache.pool) {
            (Some(pool), Some(pc)) => pool.backward(pc, &grad),
            _ => grad,
        };
        self.unit.backward(&cache.unit, grad, false);
    }
}

impl Parameterized for Stem {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.unit.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.unit.visit_mut(prefix, f);
    }
}
