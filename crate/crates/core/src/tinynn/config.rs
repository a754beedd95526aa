//! Architecture descriptors for the two supported model families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ops::{pooled_extent, ConvGeometry};

/// One row of an architecture table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution (no bias) followed by batch norm and ReLU.
    Conv { kernel: usize, stride: usize, out_channels: usize },
    BatchNorm,
    Relu,
    /// Max pool with padding `(kernel - 1) / 2`.
    MaxPool { kernel: usize, stride: usize },
    /// `blocks` residual blocks of two `kernel x kernel` convolutions each.
    /// The first block applies `stride` and, if the shape changes, a 1x1
    /// projection shortcut.
    ResidualStage { kernel: usize, out_channels: usize, stride: usize, blocks: usize },
    /// `layers` bottleneck layers (BN-ReLU-1x1 conv to `bottleneck`,
    /// BN-ReLU-`kernel` conv to `growth_rate`), each concatenated onto its input.
    DenseBlock { bottleneck: usize, growth_rate: usize, kernel: usize, layers: usize },
    /// BN-ReLU-1x1 conv to `out_channels`, then max pool.
    Transition { out_channels: usize, pool_kernel: usize, pool_stride: usize },
    GlobalAvgPool,
    FullyConnected { out_features: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::InvalidParameter(format!("{what} must be >= 1 in {self:?}")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv { kernel, stride, out_channels } => {
                positive("kernel", kernel)?;
                positive("stride", stride)?;
                positive("out_channels", out_channels)
            }
            LayerSpec::MaxPool { kernel, stride } => {
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::ResidualStage { kernel, out_channels, stride, blocks } => {
                positive("kernel", kernel)?;
                positive("stride", stride)?;
                positive("out_channels", out_channels)?;
                positive("blocks", blocks)
            }
            LayerSpec::DenseBlock { bottleneck, growth_rate, kernel, layers } => {
                positive("bottleneck", bottleneck)?;
                positive("growth_rate", growth_rate)?;
                positive("kernel", kernel)?;
                positive("layers", layers)
            }
            LayerSpec::Transition { out_channels, pool_kernel, pool_stride } => {
                positive("out_channels", out_channels)?;
                positive("pool_kernel", pool_kernel)?;
                positive("pool_stride", pool_stride)
            }
            LayerSpec::FullyConnected { out_features } => positive("out_features", out_features),
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::GlobalAvgPool => Ok(()),
        }
    }
}

/// Activation shape `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub input_size: usize,
}

/// Input-resolution profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 224x224 inputs, first convolution stride 2, as in the reference tables.
    Paper,
    /// 64x64 inputs, first convolution stride 1; same layer pattern.
    Desk,
}

impl Profile {
    pub fn input_size(self) -> usize {
        match self {
            Profile::Paper => 224,
            Profile::Desk => 64,
        }
    }

    fn first_stride(self) -> usize {
        match self {
            Profile::Paper => 2,
            Profile::Desk => 1,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::InvalidParameter(format!("unknown profile '{other}'"))),
        }
    }
}

/// The two architecture families the builders produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    ResNet,
    DenseNet,
}

impl ModelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::ResNet => "resnet",
            ModelFamily::DenseNet => "densenet",
        }
    }

    pub fn build(self, num_classes: usize, profile: Profile) -> Result<ModelConfig> {
        match self {
            ModelFamily::ResNet => build_resnet(num_classes, profile),
            ModelFamily::DenseNet => build_densenet(num_classes, profile),
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(ModelFamily::ResNet),
            "densenet" => Ok(ModelFamily::DenseNet),
            other => Err(Error::InvalidParameter(format!("unknown model '{other}'"))),
        }
    }
}

/// Residual network: 7x7/4 and 5x5/4 stem convolutions, four stages of two
/// basic blocks with widths 4, 8, 16, 32, global average pool, classifier.
pub fn build_resnet(num_classes: usize, profile: Profile) -> Result<ModelConfig> {
    check_classes(num_classes)?;
    let stage = |out_channels, stride| LayerSpec::ResidualStage { kernel: 3, out_channels, stride, blocks: 2 };
    let config = ModelConfig {
        name: "resnet".into(),
        layers: vec![
            LayerSpec::Conv { kernel: 7, stride: profile.first_stride(), out_channels: 4 },
            LayerSpec::Conv { kernel: 5, stride: 2, out_channels: 4 },
            stage(4, 1),
            stage(8, 2),
            stage(16, 2),
            stage(32, 2),
            LayerSpec::GlobalAvgPool,
            LayerSpec::FullyConnected { out_features: num_classes },
        ],
        num_classes,
        input_size: profile.input_size(),
    };
    config.validate()?;
    Ok(config)
}

/// Densely connected network: 7x7/24 stem and 3x3 max pool, four dense blocks
/// of three bottleneck layers (bottleneck 48, growth 12) separated by
/// transitions to 24 channels with 2x2 max pooling, then BN-ReLU, global
/// average pool, classifier.
pub fn build_densenet(num_classes: usize, profile: Profile) -> Result<ModelConfig> {
    check_classes(num_classes)?;
    let block = LayerSpec::DenseBlock { bottleneck: 48, growth_rate: 12, kernel: 3, layers: 3 };
    let transition = LayerSpec::Transition { out_channels: 24, pool_kernel: 2, pool_stride: 2 };
    let config = ModelConfig {
        name: "densenet".into(),
        layers: vec![
            LayerSpec::Conv { kernel: 7, stride: profile.first_stride(), out_channels: 24 },
            LayerSpec::MaxPool { kernel: 3, stride: 2 },
            block.clone(),
            transition.clone(),
            block.clone(),
            transition.clone(),
            block.clone(),
            transition,
            block,
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::FullyConnected { out_features: num_classes },
        ],
        num_classes,
        input_size: profile.input_size(),
    };
    config.validate()?;
    Ok(config)
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

impl ModelConfig {
    /// Checks every layer and that shapes chain from a 3-channel input of
    /// `input_size` down to a `num_classes` vector.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter("model has no layers".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        let out = self.trace(self.input_size)?;
        let last = out.last().expect("non-empty");
        if *last != (Shape { c: self.num_classes, h: 1, w: 1 }) {
            return Err(Error::Shape(format!(
                "model ends in {last:?}, expected {} classes",
                self.num_classes
            )));
        }
        match self.layers.last() {
            Some(LayerSpec::FullyConnected { .. }) => Ok(()),
            _ => Err(Error::InvalidParameter("model must end in a fully connected layer".into())),
        }
    }

    /// Output shape after every layer for a square input of side `input`.
    pub fn trace(&self, input: usize) -> Result<Vec<Shape>> {
        let mut shape = Shape { c: 3, h: input, w: input };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer_output(layer, shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut shape = Shape { c: 3, h: self.input_size, w: self.input_size };
        let mut total = 0;
        for layer in &self.layers {
            total += layer_params(layer, shape.c);
            shape = layer_output(layer, shape).expect("validated config");
        }
        total
    }
}

fn conv_shape(shape: Shape, out_c: usize, kernel: usize, stride: usize) -> Result<Shape> {
    let (h, w) = ConvGeometry::same(shape.c, out_c, kernel, stride).out_size(shape.h, shape.w)?;
    Ok(Shape { c: out_c, h, w })
}

fn pool_shape(shape: Shape, kernel: usize, stride: usize) -> Result<Shape> {
    let pad = (kernel - 1) / 2;
    Ok(Shape { c: shape.c, h: pooled_extent(shape.h, kernel, stride, pad)?, w: pooled_extent(shape.w, kernel, stride, pad)? })
}

pub(crate) fn layer_output(layer: &LayerSpec, shape: Shape) -> Result<Shape> {
    match *layer {
        LayerSpec::Conv { kernel, stride, out_channels } => conv_shape(shape, out_channels, kernel, stride),
        LayerSpec::BatchNorm | LayerSpec::Relu => Ok(shape),
        LayerSpec::MaxPool { kernel, stride } => pool_shape(shape, kernel, stride),
        LayerSpec::ResidualStage { kernel, out_channels, stride, blocks } => {
            let mut s = shape;
            for b in 0..blocks {
                let st = if b == 0 { stride } else { 1 };
                s = conv_shape(s, out_channels, kernel, st)?;
                s = conv_shape(s, out_channels, kernel, 1)?;
            }
            Ok(s)
        }
        LayerSpec::DenseBlock { growth_rate, layers, .. } => {
            Ok(Shape { c: shape.c + growth_rate * layers, ..shape })
        }
        LayerSpec::Transition { out_channels, pool_kernel, pool_stride } => {
            pool_shape(Shape { c: out_channels, ..shape }, pool_kernel, pool_stride)
        }
        LayerSpec::GlobalAvgPool => Ok(Shape { c: shape.c, h: 1, w: 1 }),
        LayerSpec::FullyConnected { out_features } => {
            if shape.h != 1 || shape.w != 1 {
                return Err(Error::Shape(format!(
                    "fully connected layer needs a pooled 1x1 input, got {}x{}",
                    shape.h, shape.w
                )));
            }
            Ok(Shape { c: out_features, h: 1, w: 1 })
        }
    }
}

fn layer_params(layer: &LayerSpec, in_c: usize) -> usize {
    let bn = |c: usize| 2 * c;
    match *layer {
        LayerSpec::Conv { kernel, out_channels, .. } => in_c * out_channels * kernel * kernel + bn(out_channels),
        LayerSpec::BatchNorm => bn(in_c),
        LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::GlobalAvgPool => 0,
        LayerSpec::ResidualStage { kernel, out_channels, stride, blocks } => {
            let mut total = 0;
            let mut c = in_c;
            for b in 0..blocks {
                total += c * out_channels * kernel * kernel + bn(out_channels);
                total += out_channels * out_channels * kernel * kernel + bn(out_channels);
                let st = if b == 0 { stride } else { 1 };
                if st != 1 || c != out_channels {
                    total += c * out_channels + bn(out_channels);
                }
                c = out_channels;
            }
            total
        }
        LayerSpec::DenseBlock { bottleneck, growth_rate, kernel, layers } => {
            let mut total = 0;
            let mut c = in_c;
            for _ in 0..layers {
                total += bn(c) + c * bottleneck + bn(bottleneck) + bottleneck * growth_rate * kernel * kernel;
                c += growth_rate;
            }
            total
        }
        LayerSpec::Transition { out_channels, .. } => bn(in_c) + in_c * out_channels,
        LayerSpec::FullyConnected { out_features } => in_c * out_features + out_features,
    }
}
