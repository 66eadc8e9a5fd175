use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, BatchNorm2d, Conv2d, Init, ParamGroup};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// ResNet-18 layout: 7×7 stem, four stages of two basic blocks.
    #[default]
    #[serde(rename = "resnet18-like")]
    Resnet18Like,
    /// Four `conv3×3 → batch norm → ReLU → pool` blocks, for fast tests.
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub backbone: BackboneKind,
    /// Encoder output width; fixed at 512 for `resnet18-like`.
    pub feature_dim: usize,
    /// Output width of both FFN projections.
    pub ffn_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            backbone: BackboneKind::Resnet18Like,
            feature_dim: 512,
            ffn_dim: 128,
        }
    }
}

impl EncoderSpec {
    pub fn small(feature_dim: usize, ffn_dim: usize) -> Self {
        EncoderSpec {
            backbone: BackboneKind::SmallCnn,
            feature_dim,
            ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("feature_dim and ffn_dim must be positive".into()));
        }
        if self.backbone == BackboneKind::Resnet18Like && self.feature_dim != 512 {
            return Err(Error::Config(format!(
                "resnet18-like backbones produce 512 features, not {}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        init.push(name);
        let block = BasicBlock {
            conv1: init.conv("conv1", cin, cout, 3, stride, 1, false)?,
            bn1: init.batch_norm("bn1", cout)?,
            conv2: init.conv("conv2", cout, cout, 3, 1, 1, false)?,
            bn2: init.batch_norm("bn2", cout)?,
            downsample: if stride != 1 || cin != cout {
                Some((
                    init.conv("downsample.conv", cin, cout, 1, stride, 0, false)?,
                    init.batch_norm("downsample.bn", cout)?,
                ))
            } else {
                None
            },
        };
        init.pop();
        Ok(block)
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Layers {
    Small(Vec<(Conv2d, BatchNorm2d)>),
    Resnet {
        stem: Conv2d,
        stem_bn: BatchNorm2d,
        blocks: Vec<BasicBlock>,
    },
}

/// Image → feature vector extractor.
#[derive(Debug, Clone)]
pub struct Encoder {
    kind: BackboneKind,
    feature_dim: usize,
    layers: Layers,
    params: ParamGroup,
}

const SMALL_WIDTHS: [usize; 3] = [16, 32, 64];

impl Encoder {
    pub fn new(spec: &EncoderSpec, seed: u64, dtype: DType, device: &Device) -> Result<Encoder> {
        spec.validate()?;
        let mut init = Init::new(seed, dtype, device);
        let layers = match spec.backbone {
            BackboneKind::SmallCnn => {
                let mut convs = Vec::new();
                let mut cin = 3;
                for (i, &w) in SMALL_WIDTHS.iter().chain([spec.feature_dim].iter()).enumerate() {
                    let conv = init.conv(&format!("conv{i}"), cin, w, 3, 1, 1, false)?;
                    convs.push((conv, init.batch_norm(&format!("bn{i}"), w)?));
                    cin = w;
                }
                Layers::Small(convs)
            }
            BackboneKind::Resnet18Like => {
                let stem = init.conv("conv1", 3, 64, 7, 2, 3, false)?;
                let stem_bn = init.batch_norm("bn1", 64)?;
                let mut blocks = Vec::new();
                let mut cin = 64;
                for (stage, &w) in [64usize, 128, 256, 512].iter().enumerate() {
                    for b in 0..2 {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let name = format!("layer{}.{b}", stage + 1);
                        blocks.push(BasicBlock::new(&mut init, &name, cin, w, stride)?);
                        cin = w;
                    }
                }
                Layers::Resnet {
                    stem,
                    stem_bn,
                    blocks,
                }
            }
        };
        Ok(Encoder {
            kind: spec.backbone,
            feature_dim: spec.feature_dim,
            layers,
            params: init.finish(),
        })
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    /// `N × 3 × H × W` images → `N × feature_dim` features. `train` selects
    /// batch statistics in batch-norm layers.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match &self.layers {
            Layers::Small(convs) => {
                let mut y = x.clone();
                for (i, (conv, bn)) in convs.iter().enumerate() {
                    y = bn.forward(&conv.forward(&y)?, train)?.relu()?;
                    if i + 1 < convs.len() && y.dim(2)? >= 2 && y.dim(3)? >= 2 {
                        y = y.avg_pool2d(2)?;
                    }
                }
                global_avg_pool(&y)
            }
            Layers::Resnet {
                stem,
                stem_bn,
                blocks,
            } => {
                let mut y = stem_bn.forward(&stem.forward(x)?, train)?.relu()?;
                if y.dim(2)? >= 2 && y.dim(3)? >= 2 {
                    y = y.max_pool2d(2)?;
                }
                for b in blocks {
                    y = b.forward(&y, train)?;
                }
                global_avg_pool(&y)
            }
        }
    }

    /// Copies every tensor of `other` into this encoder (same architecture).
    pub fn load_from(&self, other: &ParamGroup) -> Result<()> {
        copy_group(&self.params, other)
    }

    pub fn deep_clone(&self) -> Result<Encoder> {
        let spec = EncoderSpec {
            backbone: self.kind,
            feature_dim: self.feature_dim,
            ffn_dim: 1,
        };
        let first = self.params.params.values().next().expect("encoders have parameters");
        let out = Encoder::new(&spec, 0, first.dtype(), first.device())?;
        out.load_from(&self.params)?;
        Ok(out)
    }
}

/// Overwrites `dst` tensors with same-named tensors of `src`.
pub fn copy_group(dst: &ParamGroup, src: &ParamGroup) -> Result<()> {
    let mut bad = Vec::new();
    for (name, var) in dst.tensors() {
        let from = src.params.get(name).or_else(|| src.buffers.get(name));
        match from {
            Some(t) if t.shape() == var.shape() => var.set(&t.as_tensor().to_dtype(var.dtype())?)?,
            _ => bad.push(name.clone()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::checkpoint("tensor missing or mis-shaped", bad));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cnn_feature_shape() {
        let enc = Encoder::new(&EncoderSpec::small(24, 8), 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((3, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&x, false).unwrap().dims(), &[3, 24]);
    }

    #[test]
    fn resnet18_like_feature_shape_and_size() {
        let enc = Encoder::new(&EncoderSpec::default(), 0, DType::F32, &Device::Cpu).unwrap();
        // torchvision's resnet18 without the fc layer has 11,176,512 weights.
        assert_eq!(enc.params().num_params(), 11_176_512);
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&x, true).unwrap().dims(), &[2, 512]);
    }

    #[test]
    fn resnet_requires_512_features() {
        let spec = EncoderSpec {
            feature_dim: 256,
            ..EncoderSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn deep_clone_is_independent() {
        let enc = Encoder::new(&EncoderSpec::small(8, 4), 3, DType::F32, &Device::Cpu).unwrap();
        let copy = enc.deep_clone().unwrap();
        assert_eq!(enc.params().checksum().unwrap(), copy.params().checksum().unwrap());
        let v = &copy.params().params["conv0.weight"];
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        assert_ne!(enc.params().checksum().unwrap(), copy.params().checksum().unwrap());
    }
}
