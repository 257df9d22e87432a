//! The state classifier: a residual backbone truncated at a chosen
//! activation, followed by an added head (1×1 conv, two k×k convs, each with
//! batch norm and ReLU), global average pooling and a softmax layer.

mod blocks;
mod spec;

pub use blocks::{Bottleneck, ConvBnAct, Stem};
pub use spec::{BackboneProvider, BackboneSpec, CutPoint, HeadSpec, ModelSpec, StageSpec, Topology};

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, softmax, softmax_cross_entropy, BnMode, Dense, MaxPool2d, Param,
    ParamKind, Parameterized,
};
use crate::seed::rng_for;
use blocks::{BottleneckCache, ConvBnActCache, StemCache};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone provider `{0}`")]
    UnknownProvider(String),
    #[error("truncation index {truncation} out of range 1..={max}")]
    TruncationOutOfRange { truncation: usize, max: usize },
    #[error("class count must be at least 2 (got {0})")]
    InvalidClassCount(usize),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input shape mismatch: expected N×{expected_h}×{expected_w}×3, got {got:?}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got: Vec<usize>,
    },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelMismatch { labels: usize, batch: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("pretrained weights requested but unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    /// The 1×1 and k×k convolutions added on top of the backbone.
    Added,
    /// The softmax layer.
    Final,
}

/// Parameters excluded from updates during a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeScope {
    /// Only the softmax layer trains.
    AllButFinal,
    /// The backbone is frozen; added layers and softmax train.
    BackboneOnly,
    /// Added layers are unfrozen on top of the softmax layer; backbone frozen.
    AddedLayersUnfrozen,
    /// Everything trains.
    #[serde(rename = "none")]
    NoFreeze,
}

impl FreezeScope {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            FreezeScope::AllButFinal => group == ParamGroup::Final,
            FreezeScope::BackboneOnly | FreezeScope::AddedLayersUnfrozen => group != ParamGroup::Backbone,
            FreezeScope::NoFreeze => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeScope::AllButFinal => "all_but_final",
            FreezeScope::BackboneOnly => "backbone_only",
            FreezeScope::AddedLayersUnfrozen => "added_layers_unfrozen",
            FreezeScope::NoFreeze => "none",
        }
    }
}

impl fmt::Display for FreezeScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stem: Stem,
    pub blocks: Vec<Bottleneck>,
}

#[derive(Clone, Debug)]
struct BackboneCache {
    stem: StemCache,
    blocks: Vec<BottleneckCache>,
}

impl Backbone {
    fn build<R: Rng + ?Sized>(topology: &Topology, cut: CutPoint, rng: &mut R) -> Self {
        let stem = Stem {
            unit: ConvBnAct::new(
                3,
                topology.stem_channels,
                topology.stem_kernel,
                topology.stem_stride,
                true,
                rng,
            ),
            pool: topology.stem_pool.then_some(MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            }),
        };
        let mut blocks = Vec::with_capacity(cut.blocks);
        let mut channels = topology.stem_channels;
        'outer: for stage in &topology.stages {
            for b in 0..stage.blocks {
                if blocks.len() == cut.blocks {
                    break 'outer;
                }
                let depth = if blocks.len() + 1 == cut.blocks {
                    cut.last_depth
                } else {
                    3
                };
                let stride = if b == 0 { stage.stride } else { 1 };
                let block = Bottleneck::new(channels, stage.mid_channels, stage.out_channels, stride, depth, rng);
                channels = block.out_channels();
                blocks.push(block);
            }
        }
        Self { stem, blocks }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.out_channels())
            .unwrap_or(self.stem.unit.conv.out_channels)
    }

    fn forward(&self, x: &Array4<f64>, mode: BnMode, keep: bool) -> (Array4<f64>, Option<BackboneCache>) {
        let (mut h, stem) = self.stem.forward(x, mode, keep);
        let mut caches = Vec::new();
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, mode, keep);
            h = next;
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        (h, stem.map(|stem| BackboneCache { stem, blocks: caches }))
    }

    fn update_running(&mut self, cache: &BackboneCache) {
        self.stem.update_running(&cache.stem);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.update_running(c);
        }
    }

    fn backward(&mut self, cache: &BackboneCache, grad: Array4<f64>) {
        let mut grad = grad;
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            grad = block.backward(c, grad, true).expect("requested");
        }
        self.stem.backward(&cache.stem, grad);
    }
}

impl Parameterized for Backbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i:02}"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i:02}"), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub pointwise: ConvBnAct,
    pub conv1: ConvBnAct,
    pub conv2: ConvBnAct,
    pub classifier: Dense,
}

#[derive(Clone, Debug)]
struct AddedCache {
    pointwise: ConvBnActCache,
    conv1: ConvBnActCache,
    conv2: ConvBnActCache,
}

impl Head {
    fn build<R: Rng + ?Sized>(in_channels: usize, spec: &HeadSpec, rng: &mut R) -> Self {
        Self {
            pointwise: ConvBnAct::new(in_channels, spec.pointwise_channels, 1, 1, true, rng),
            conv1: ConvBnAct::new(spec.pointwise_channels, spec.conv_channels, spec.kernel, 1, true, rng),
            conv2: ConvBnAct::new(spec.conv_channels, spec.conv_channels, spec.kernel, 1, true, rng),
            classifier: Dense::new(spec.conv_channels, spec.class_count, rng),
        }
    }

    fn forward_added(&self, x: &Array4<f64>, mode: BnMode, keep: bool) -> (Array4<f64>, Option<AddedCache>) {
        let (h, pointwise) = self.pointwise.forward(x, mode, keep);
        let (h, conv1) = self.conv1.forward(&h, mode, keep);
        let (h, conv2) = self.conv2.forward(&h, mode, keep);
        let cache = keep.then(|| AddedCache {
            pointwise: pointwise.unwrap(),
            conv1: conv1.unwrap(),
            conv2: conv2.unwrap(),
        });
        (h, cache)
    }
}

impl Parameterized for Head {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.pointwise.visit(&format!("{prefix}.pointwise"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.pointwise.visit_mut(&format!("{prefix}.pointwise"), f);
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
    }
}

/// Digest of one named tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDigest {
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub digest: String,
}

/// Content digests of every named tensor of a model.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParameterDigest {
    pub tensors: BTreeMap<String, TensorDigest>,
}

impl ParameterDigest {
    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&String, &TensorDigest)> {
        self.tensors.iter().filter(move |(_, t)| t.group == group)
    }

    /// Names whose digest differs between two snapshots.
    pub fn changed(&self, other: &ParameterDigest) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(name, t)| other.tensors.get(*name).map(|o| o.digest != t.digest).unwrap_or(true))
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Combined digest of all tensors in a group.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.group(group) {
            hasher.update(name.as_bytes());
            hasher.update(t.digest.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

pub fn tensor_digest(param: &Param) -> String {
    let mut hasher = Sha256::new();
    for d in param.value.shape() {
        hasher.update((*d as u64).to_le_bytes());
    }
    for v in param.value.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Metadata about one named tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub len: usize,
}

/// Output of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    /// Cross-entropy plus L2 penalty.
    pub loss: f64,
    pub data_loss: f64,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    pub backbone: Backbone,
    pub head: Head,
    class_names: Vec<String>,
}

struct ForwardCache {
    backbone: Option<BackboneCache>,
    added: Option<AddedCache>,
    feature_dim: (usize, usize, usize, usize),
    classifier: crate::nn::DenseCache,
}

/// Builds a model from validated specs. Initialization is a pure function of
/// `spec.init_seed`; the backbone and head draw from separate streams.
pub fn build_model(spec: ModelSpec) -> Result<Model, ModelError> {
    let topology = spec.validate()?;
    let cut = topology.locate(spec.backbone.truncation).expect("validated");
    let mut backbone_rng = rng_for(spec.init_seed, &[b"init", b"backbone"]);
    let backbone = Backbone::build(&topology, cut, &mut backbone_rng);
    let mut head_rng = rng_for(spec.init_seed, &[b"init", b"head"]);
    let head = Head::build(backbone.out_channels(), &spec.head, &mut head_rng);
    let class_names = (0..spec.head.class_count).map(|i| format!("class{i}")).collect();
    let mut model = Model {
        spec,
        backbone,
        head,
        class_names,
    };
    if model.spec.backbone.pretrained {
        let path = model.spec.backbone.weights.clone().ok_or_else(|| {
            ModelError::WeightsUnavailable(format!(
                "provider `{}` needs a weights archive for pretrained initialization",
                model.spec.backbone.provider
            ))
        })?;
        let tensors = crate::checkpoint::read_archive(&path)?;
        model.load_group(&tensors, ParamGroup::Backbone)?;
    }
    Ok(model)
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub(crate) fn set_spec(&mut self, spec: ModelSpec) {
        self.spec = spec;
    }

    pub fn class_count(&self) -> usize {
        self.spec.head.class_count
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, ModelError> {
        if names.len() != self.class_count() {
            return Err(ModelError::InvalidSpec(format!(
                "{} class names for a {}-class head",
                names.len(),
                self.class_count()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Width of the globally averaged feature vector fed to the softmax layer.
    pub fn feature_width(&self) -> usize {
        self.spec.head.conv_channels
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("backbone.") {
            ParamGroup::Backbone
        } else if name.starts_with("head.classifier.") {
            ParamGroup::Final
        } else {
            ParamGroup::Added
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Param)) {
        self.backbone.visit("backbone", f);
        self.head.visit("head", f);
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.backbone.visit_mut("backbone", f);
        self.head.visit_mut("head", f);
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name, p)));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.visit_params_mut(&mut |name, p| out.push((name, p)));
        out
    }

    pub fn parameter_inventory(&self) -> Vec<ParamInfo> {
        self.named_params()
            .into_iter()
            .map(|(name, p)| ParamInfo {
                group: Self::group_of(&name),
                kind: p.kind,
                len: p.len(),
                name,
            })
            .collect()
    }

    /// Number of learned scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.kind.is_learned())
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn group_parameter_count(&self, group: ParamGroup) -> usize {
        self.named_params()
            .iter()
            .filter(|(n, p)| p.kind.is_learned() && Self::group_of(n) == group)
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn snapshot_parameters(&self) -> ParameterDigest {
        let tensors = self
            .named_params()
            .into_iter()
            .map(|(name, p)| {
                let entry = TensorDigest {
                    group: Self::group_of(&name),
                    kind: p.kind,
                    digest: tensor_digest(p),
                };
                (name, entry)
            })
            .collect();
        ParameterDigest { tensors }
    }

    /// Overwrites every tensor of `group` from a name → tensor map.
    pub fn load_group(
        &mut self,
        tensors: &BTreeMap<String, ndarray::ArrayD<f64>>,
        group: ParamGroup,
    ) -> Result<(), ModelError> {
        for (name, p) in self.named_params_mut() {
            if Self::group_of(&name) != group {
                continue;
            }
            let t = tensors
                .get(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("archive is missing tensor `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(t);
        }
        Ok(())
    }

    /// Swaps the softmax layer for a freshly initialized one with
    /// `new_class_count` units. All other tensors are copied unchanged.
    pub fn replace_head(&self, new_class_count: usize, seed: u64) -> Result<Model, ModelError> {
        if new_class_count < 2 {
            return Err(ModelError::InvalidClassCount(new_class_count));
        }
        let mut model = self.clone();
        let mut rng = rng_for(seed, &[b"replace-head", &(new_class_count as u64).to_le_bytes()]);
        model.head.classifier = Dense::new(self.feature_width(), new_class_count, &mut rng);
        model.spec.head.class_count = new_class_count;
        model.class_names = (0..new_class_count).map(|i| format!("class{i}")).collect();
        Ok(model)
    }

    fn check_input(&self, batch: &Array4<f64>) -> Result<(), ModelError> {
        let (_, h, w, c) = batch.dim();
        let (eh, ew) = self.spec.input_size;
        if h != eh || w != ew || c != 3 {
            return Err(ModelError::ShapeMismatch {
                expected_h: eh,
                expected_w: ew,
                got: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn to_channel_major(batch: &Array4<f64>) -> Array4<f64> {
        batch
            .view()
            .permuted_axes([3, 0, 1, 2])
            .as_standard_layout()
            .into_owned()
    }

    fn logits_inference(&self, x: &Array4<f64>) -> Array2<f64> {
        let (h, _) = self.backbone.forward(x, BnMode::Running, false);
        let (h, _) = self.head.forward_added(&h, BnMode::Running, false);
        let pooled = global_avg_pool(&h);
        self.head.classifier.forward(&pooled, false).0
    }

    /// Class probabilities for an `N×H×W×3` batch, using running statistics.
    pub fn predict(&self, batch: &Array4<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_input(batch)?;
        let n = batch.len_of(Axis(0));
        let mut out = Array2::<f64>::zeros((n, self.class_count()));
        const CHUNK: usize = 32;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let chunk = batch.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            let probs = softmax(&self.logits_inference(&Self::to_channel_major(&chunk)));
            out.slice_mut(ndarray::s![start..end, ..]).assign(&probs);
        }
        Ok(out)
    }

    fn bn_mode(scope: FreezeScope, group: ParamGroup) -> BnMode {
        // frozen layers keep their running statistics fixed
        if scope.trains(group) {
            BnMode::Batch
        } else {
            BnMode::Running
        }
    }

    fn check_labels(&self, batch: &Array4<f64>, labels: &[usize]) -> Result<(), ModelError> {
        self.check_input(batch)?;
        let n = batch.len_of(Axis(0));
        if labels.len() != n {
            return Err(ModelError::LabelMismatch {
                labels: labels.len(),
                batch: n,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.class_count()) {
            return Err(ModelError::LabelOutOfRange {
                label: bad,
                classes: self.class_count(),
            });
        }
        Ok(())
    }

    fn forward_train(&self, x: &Array4<f64>, scope: FreezeScope, keep: bool) -> (Array2<f64>, Option<ForwardCache>) {
        let train_backbone = scope.trains(ParamGroup::Backbone);
        let train_added = scope.trains(ParamGroup::Added);
        let (h, backbone) =
            self.backbone
                .forward(x, Self::bn_mode(scope, ParamGroup::Backbone), keep && train_backbone);
        let (h, added) = self.head.forward_added(
            &h,
            Self::bn_mode(scope, ParamGroup::Added),
            keep && (train_added || train_backbone),
        );
        let feature_dim = h.dim();
        let pooled = global_avg_pool(&h);
        let (logits, classifier) = self.head.classifier.forward(&pooled, keep);
        let cache = classifier.map(|classifier| ForwardCache {
            backbone,
            added,
            feature_dim,
            classifier,
        });
        (logits, cache)
    }

    fn l2_penalty(&self, scope: FreezeScope, l2: f64) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        self.named_params()
            .iter()
            .filter(|(n, p)| p.kind == ParamKind::Weight && scope.trains(Self::group_of(n)))
            .map(|(_, p)| p.value.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            * l2
    }

    /// Training-mode objective (cross-entropy + `l2·Σw²` over trainable
    /// weights) without touching any state.
    pub fn training_loss(
        &self,
        batch: &Array4<f64>,
        labels: &[usize],
        scope: FreezeScope,
        l2: f64,
    ) -> Result<f64, ModelError> {
        self.check_labels(batch, labels)?;
        let x = Self::to_channel_major(batch);
        let (logits, _) = self.forward_train(&x, scope, false);
        let (data_loss, _) = softmax_cross_entropy(&logits, labels);
        Ok(data_loss + self.l2_penalty(scope, l2))
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Forward and backward pass in training mode. Gradients of trainable
    /// tensors are overwritten; running statistics of trainable batch-norm
    /// layers are updated.
    pub fn train_step_gradients(
        &mut self,
        batch: &Array4<f64>,
        labels: &[usize],
        scope: FreezeScope,
        l2: f64,
    ) -> Result<StepOutput, ModelError> {
        self.check_labels(batch, labels)?;
        self.zero_grad();
        let x = Self::to_channel_major(batch);
        let (logits, cache) = self.forward_train(&x, scope, true);
        let cache = cache.expect("kept");
        let (data_loss, dlogits) = softmax_cross_entropy(&logits, labels);
        let correct = logits
            .axis_iter(Axis(0))
            .zip(labels)
            .filter(|(row, &y)| crate::metrics::argmax(row.as_slice().expect("contiguous row")) == y)
            .count();

        if let Some(c) = &cache.backbone {
            self.backbone.update_running(c);
        }
        if let Some(c) = &cache.added {
            if scope.trains(ParamGroup::Added) {
                self.head.pointwise.update_running(&c.pointwise);
                self.head.conv1.update_running(&c.conv1);
                self.head.conv2.update_running(&c.conv2);
            }
        }

        let need_features = cache.added.is_some();
        let dpooled = self
            .head
            .classifier
            .backward(&cache.classifier, &dlogits, need_features);
        if let (Some(dpooled), Some(added)) = (dpooled, &cache.added) {
            let grad = global_avg_pool_backward(&dpooled, cache.feature_dim);
            let need_backbone = cache.backbone.is_some();
            let grad = self.head.conv2.backward(&added.conv2, grad, true).expect("requested");
            let grad = self.head.conv1.backward(&added.conv1, grad, true).expect("requested");
            let grad = self.head.pointwise.backward(&added.pointwise, grad, need_backbone);
            if let (Some(grad), Some(bc)) = (grad, &cache.backbone) {
                self.backbone.backward(bc, grad);
            }
        }

        let penalty = self.l2_penalty(scope, l2);
        if l2 != 0.0 {
            for (name, p) in self.named_params_mut() {
                if p.kind == ParamKind::Weight && scope.trains(Self::group_of(&name)) {
                    let value = p.value.clone();
                    p.grad_mut().scaled_add(2.0 * l2, &value);
                }
            }
        }
        Ok(StepOutput {
            loss: data_loss + penalty,
            data_loss,
            correct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seed: u64) -> Array4<f64> {
        use rand::Rng;
        let mut rng = rng_for(seed, &[b"batch"]);
        Array4::from_shape_simple_fn((n, 16, 16, 3), || rng.random::<f64>())
    }

    #[test]
    fn tiny_model_predicts_distributions() {
        let model = build_model(ModelSpec::tiny(11, 1)).unwrap();
        let p = model.predict(&batch(5, 2)).unwrap();
        assert_eq!(p.dim(), (5, 11));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_batch_and_shape_errors() {
        let model = build_model(ModelSpec::tiny(11, 1)).unwrap();
        assert_eq!(model.predict(&Array4::zeros((0, 16, 16, 3))).unwrap().dim(), (0, 11));
        assert!(matches!(
            model.predict(&Array4::zeros((1, 8, 16, 3))),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn duplicated_rows_give_identical_outputs() {
        let model = build_model(ModelSpec::tiny(11, 1)).unwrap();
        let one = batch(1, 3);
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let p = model.predict(&two).unwrap();
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn parameter_count_agrees_with_spec() {
        let spec = ModelSpec::tiny(11, 1);
        let model = build_model(spec.clone()).unwrap();
        assert_eq!(model.parameter_count(), spec.parameter_count().unwrap());
        let mut truncated = spec.clone();
        truncated.backbone.truncation = 5;
        let model = build_model(truncated.clone()).unwrap();
        assert_eq!(model.parameter_count(), truncated.parameter_count().unwrap());
        assert_eq!(model.backbone.out_channels(), 4);
    }

    #[test]
    fn pretrained_without_weights_fails() {
        let mut spec = ModelSpec::tiny(11, 1);
        spec.backbone.pretrained = true;
        assert!(matches!(build_model(spec), Err(ModelError::WeightsUnavailable(_))));
    }

    #[test]
    fn freeze_scopes_partition_groups() {
        use FreezeScope::*;
        use ParamGroup::*;
        assert!(AllButFinal.trains(Final) && !AllButFinal.trains(Added) && !AllButFinal.trains(Backbone));
        assert!(BackboneOnly.trains(Added) && !BackboneOnly.trains(Backbone));
        assert!(AddedLayersUnfrozen.trains(Added) && AddedLayersUnfrozen.trains(Final));
        assert!([Backbone, Added, Final].iter().all(|g| NoFreeze.trains(*g)));
        assert_eq!(serde_json::to_string(&NoFreeze).unwrap(), "\"none\"");
    }

    #[test]
    fn replace_head_keeps_other_tensors() {
        let model = build_model(ModelSpec::tiny(11, 1)).unwrap();
        let five = model.replace_head(5, 9).unwrap();
        let (a, b) = (model.snapshot_parameters(), five.snapshot_parameters());
        assert_eq!(
            a.group_checksum(ParamGroup::Backbone),
            b.group_checksum(ParamGroup::Backbone)
        );
        assert_eq!(a.group_checksum(ParamGroup::Added), b.group_checksum(ParamGroup::Added));
        assert_ne!(a.group_checksum(ParamGroup::Final), b.group_checksum(ParamGroup::Final));
        assert_eq!(
            model.parameter_count() - five.parameter_count(),
            6 * (model.feature_width() + 1)
        );
        assert!(matches!(
            model.replace_head(1, 0),
            Err(ModelError::InvalidClassCount(1))
        ));
    }
}
