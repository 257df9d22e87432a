use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

/// Where backbone weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackboneProvider {
    /// 50-layer residual topology; with `pretrained` the weights are read
    /// from a parameter archive.
    ProductionPretrained,
    /// Four-channel, two-block residual network with seeded random weights.
    TinyRandomTest,
}

impl BackboneProvider {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneProvider::ProductionPretrained => "production-pretrained",
            BackboneProvider::TinyRandomTest => "tiny-random-test",
        }
    }
}

impl fmt::Display for BackboneProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneProvider {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "production-pretrained" => Ok(BackboneProvider::ProductionPretrained),
            "tiny-random-test" => Ok(BackboneProvider::TinyRandomTest),
            other => Err(ModelError::UnknownProvider(other.to_string())),
        }
    }
}

impl TryFrom<String> for BackboneProvider {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<BackboneProvider> for String {
    fn from(p: BackboneProvider) -> Self {
        p.as_str().to_string()
    }
}

/// One stage of bottleneck blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Full (untruncated) residual topology of a backbone family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub stages: Vec<StageSpec>,
}

impl Topology {
    /// The 50-layer reference network (stride on the 3×3 convolution).
    pub fn resnet50() -> Self {
        Self {
            name: "resnet50".into(),
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stages: vec![
                StageSpec {
                    blocks: 3,
                    mid_channels: 64,
                    out_channels: 256,
                    stride: 1,
                },
                StageSpec {
                    blocks: 4,
                    mid_channels: 128,
                    out_channels: 512,
                    stride: 2,
                },
                StageSpec {
                    blocks: 6,
                    mid_channels: 256,
                    out_channels: 1024,
                    stride: 2,
                },
                StageSpec {
                    blocks: 3,
                    mid_channels: 512,
                    out_channels: 2048,
                    stride: 2,
                },
            ],
        }
    }

    pub fn tiny() -> Self {
        Self {
            name: "tiny-resnet".into(),
            stem_channels: 4,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
            stages: vec![StageSpec {
                blocks: 2,
                mid_channels: 4,
                out_channels: 8,
                stride: 2,
            }],
        }
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Nonlinearities counted from the input: one in the stem, three per block.
    pub fn activation_count(&self) -> usize {
        1 + 3 * self.block_count()
    }

    /// Where the network is cut for a given activation index.
    pub fn locate(&self, activation: usize) -> Option<CutPoint> {
        if activation == 0 || activation > self.activation_count() {
            return None;
        }
        if activation == 1 {
            return Some(CutPoint {
                blocks: 0,
                last_depth: 0,
            });
        }
        let k = activation - 2;
        Some(CutPoint {
            blocks: k / 3 + 1,
            last_depth: k % 3 + 1,
        })
    }

    /// `(stage, block-in-stage)` of a global block index, both 1-based.
    pub fn block_position(&self, block: usize) -> (usize, usize) {
        let mut remaining = block;
        for (i, s) in self.stages.iter().enumerate() {
            if remaining < s.blocks {
                return (i + 1, remaining + 1);
            }
            remaining -= s.blocks;
        }
        (self.stages.len(), 0)
    }
}

/// Number of blocks kept and how many activations of the last one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutPoint {
    pub blocks: usize,
    pub last_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: String,
    /// 1-based activation index after which the backbone ends.
    pub truncation: usize,
    pub pretrained: bool,
    pub provider: BackboneProvider,
    /// Parameter archive supplying pretrained backbone tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl BackboneSpec {
    /// 50-layer topology cut at its 46th activation.
    pub fn production(pretrained: bool, weights: Option<PathBuf>) -> Self {
        Self {
            family: "resnet50".into(),
            truncation: 46,
            pretrained,
            provider: BackboneProvider::ProductionPretrained,
            weights,
        }
    }

    pub fn tiny() -> Self {
        let topology = Topology::tiny();
        Self {
            family: topology.name.clone(),
            truncation: topology.activation_count(),
            pretrained: false,
            provider: BackboneProvider::TinyRandomTest,
            weights: None,
        }
    }

    pub fn topology(&self) -> Result<Topology, ModelError> {
        let topology = match self.provider {
            BackboneProvider::ProductionPretrained => Topology::resnet50(),
            BackboneProvider::TinyRandomTest => Topology::tiny(),
        };
        if self.family != topology.name {
            return Err(ModelError::InvalidSpec(format!(
                "provider `{}` serves family `{}`, not `{}`",
                self.provider, topology.name, self.family
            )));
        }
        Ok(topology)
    }

    pub fn validate(&self) -> Result<Topology, ModelError> {
        let topology = self.topology()?;
        if topology.locate(self.truncation).is_none() {
            return Err(ModelError::TruncationOutOfRange {
                truncation: self.truncation,
                max: topology.activation_count(),
            });
        }
        Ok(topology)
    }

    /// Human-readable description of the cut, stored in checkpoint metadata.
    pub fn describe_cut(&self) -> Result<String, ModelError> {
        let topology = self.validate()?;
        let cut = topology.locate(self.truncation).expect("validated");
        if cut.blocks == 0 {
            return Ok(format!(
                "{}: activation {} = stem output",
                topology.name, self.truncation
            ));
        }
        let (stage, block) = topology.block_position(cut.blocks - 1);
        let part = match cut.last_depth {
            1 => "after the 1x1 reduce activation",
            2 => "after the 3x3 activation",
            _ => "after the residual-add activation",
        };
        Ok(format!(
            "{}: activation {} of {} = stage {stage} block {block}, {part}",
            topology.name,
            self.truncation,
            topology.activation_count()
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub pointwise_channels: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub class_count: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            pointwise_channels: 512,
            conv_channels: 512,
            kernel: 3,
            class_count: 11,
        }
    }
}

impl HeadSpec {
    pub fn tiny(class_count: usize) -> Self {
        Self {
            pointwise_channels: 8,
            conv_channels: 8,
            kernel: 3,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.class_count < 2 {
            return Err(ModelError::InvalidClassCount(self.class_count));
        }
        if self.pointwise_channels == 0 || self.conv_channels == 0 || self.kernel == 0 {
            return Err(ModelError::InvalidSpec(
                "head channel counts and kernel must be ≥ 1".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "head kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    /// Input `(height, width)`.
    pub input_size: (usize, usize),
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn production() -> Self {
        Self {
            backbone: BackboneSpec::production(false, None),
            head: HeadSpec::default(),
            input_size: (224, 224),
            init_seed: 0,
        }
    }

    pub fn tiny(class_count: usize, seed: u64) -> Self {
        Self {
            backbone: BackboneSpec::tiny(),
            head: HeadSpec::tiny(class_count),
            input_size: (16, 16),
            init_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<Topology, ModelError> {
        self.head.validate()?;
        let topology = self.backbone.validate()?;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(ModelError::InvalidSpec("input size must be positive".into()));
        }
        Ok(topology)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Learned parameter count computed from the spec alone (no allocation).
    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        let topology = self.validate()?;
        let cut = topology.locate(self.backbone.truncation).expect("validated");
        let conv = |i: usize, o: usize, k: usize| i * o * k * k;
        let bn = |c: usize| 2 * c;
        let mut total = conv(3, topology.stem_channels, topology.stem_kernel) + bn(topology.stem_channels);
        let mut channels = topology.stem_channels;
        let mut index = 0;
        'outer: for stage in &topology.stages {
            for b in 0..stage.blocks {
                if index == cut.blocks {
                    break 'outer;
                }
                let depth = if index + 1 == cut.blocks { cut.last_depth } else { 3 };
                let stride = if b == 0 { stage.stride } else { 1 };
                let (mid, out) = (stage.mid_channels, stage.out_channels);
                total += conv(channels, mid, 1) + bn(mid);
                let mut next = mid;
                if depth >= 2 {
                    total += conv(mid, mid, 3) + bn(mid);
                }
                if depth >= 3 {
                    total += conv(mid, out, 1) + bn(out);
                    if channels != out || stride != 1 {
                        total += conv(channels, out, 1) + bn(out);
                    }
                    next = out;
                }
                channels = next;
                index += 1;
            }
        }
        let h = &self.head;
        total += conv(channels, h.pointwise_channels, 1) + bn(h.pointwise_channels);
        total += conv(h.pointwise_channels, h.conv_channels, h.kernel) + bn(h.conv_channels);
        total += conv(h.conv_channels, h.conv_channels, h.kernel) + bn(h.conv_channels);
        total += h.class_count * (h.conv_channels + 1);
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet50_activation_layout() {
        let t = Topology::resnet50();
        assert_eq!(t.activation_count(), 49);
        // 46 = 1 (stem) + 3·15: the end of the 15th block, i.e. stage 4 block 2
        assert_eq!(
            t.locate(46),
            Some(CutPoint {
                blocks: 15,
                last_depth: 3
            })
        );
        assert_eq!(t.block_position(14), (4, 2));
        assert_eq!(
            t.locate(47),
            Some(CutPoint {
                blocks: 16,
                last_depth: 1
            })
        );
        assert_eq!(
            t.locate(1),
            Some(CutPoint {
                blocks: 0,
                last_depth: 0
            })
        );
        assert_eq!(t.locate(0), None);
        assert_eq!(t.locate(50), None);
    }

    #[test]
    fn cut_description_names_block() {
        let d = BackboneSpec::production(false, None).describe_cut().unwrap();
        assert!(d.contains("stage 4 block 2"), "{d}");
        assert!(d.contains("activation 46 of 49"), "{d}");
    }

    #[test]
    fn provider_parsing() {
        assert_eq!(
            "tiny-random-test".parse::<BackboneProvider>().unwrap(),
            BackboneProvider::TinyRandomTest
        );
        assert!(matches!(
            "imagenet-hub".parse::<BackboneProvider>(),
            Err(ModelError::UnknownProvider(_))
        ));
        let json = r#"{"family":"x","truncation":1,"pretrained":false,"provider":"somewhere"}"#;
        assert!(serde_json::from_str::<BackboneSpec>(json).is_err());
    }

    #[test]
    fn head_validation() {
        assert!(matches!(
            HeadSpec::tiny(1).validate(),
            Err(ModelError::InvalidClassCount(1))
        ));
        assert!(HeadSpec::tiny(2).validate().is_ok());
        let mut spec = ModelSpec::tiny(11, 0);
        spec.backbone.truncation = 99;
        assert!(matches!(spec.validate(), Err(ModelError::TruncationOutOfRange { .. })));
    }
}
