//! Declarative network configurations for the generator, encoder, and pair
//! discriminator, with shape propagation and the two standard architecture
//! families (the compact MNIST stack and the deeper SVHN/CelebA stack).

use crate::error::{Error, Result};
use crate::latent::LatentSpec;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Sigmoid,
    Tanh,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Elu => "ELU",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        };
        f.write_str(s)
    }
}

/// One step of a layer stack. `Conv`/`Dense` entries expand to the base map
/// followed by optional batch normalization and the activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerDesc {
    Conv {
        kernel: usize,
        channels: usize,
        stride: usize,
        batch_norm: bool,
        activation: Activation,
    },
    TConv {
        kernel: usize,
        channels: usize,
        stride: usize,
        batch_norm: bool,
        activation: Activation,
    },
    Dense {
        units: usize,
        batch_norm: bool,
        activation: Activation,
    },
    Reshape {
        height: usize,
        width: usize,
        channels: usize,
    },
    Flatten,
    Dropout {
        prob: f64,
    },
}

impl fmt::Display for LayerDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDesc::Conv {
                kernel,
                channels,
                stride,
                batch_norm,
                activation,
            } => write!(
                f,
                "{kernel}x{kernel} conv {channels}{}, {activation}, stride {stride}",
                if *batch_norm { ", BN" } else { "" }
            ),
            LayerDesc::TConv {
                kernel,
                channels,
                stride,
                batch_norm,
                activation,
            } => write!(
                f,
                "{kernel}x{kernel} tconv {channels}{}, {activation}, stride {stride}",
                if *batch_norm { ", BN" } else { "" }
            ),
            LayerDesc::Dense {
                units,
                batch_norm,
                activation,
            } => write!(
                f,
                "FC {units}{}, {activation}",
                if *batch_norm { ", BN" } else { "" }
            ),
            LayerDesc::Reshape {
                height,
                width,
                channels,
            } => write!(f, "reshape {height}x{width}x{channels}"),
            LayerDesc::Flatten => write!(f, "flatten"),
            LayerDesc::Dropout { prob } => write!(f, "dropout {prob}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorShape {
    Vector {
        dim: usize,
    },
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorShape::Vector { dim } => write!(f, "vector {dim}"),
            TensorShape::Image {
                height,
                width,
                channels,
            } => write!(f, "image {height}x{width}x{channels}"),
        }
    }
}

/// An ordered layer stack with a declared input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqConfig {
    pub input: TensorShape,
    pub layers: Vec<LayerDesc>,
}

impl SeqConfig {
    /// Propagates shapes through the stack, checking every structural
    /// invariant, and returns the output shape.
    pub fn output_shape(&self) -> Result<TensorShape> {
        let mut shape = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            let fail =
                |msg: String| -> Result<TensorShape> {
                    Err(Error::config(format!("layer {i} ({layer}): {msg}")))
                };
            shape = match *layer {
                LayerDesc::Conv {
                    kernel,
                    channels,
                    stride,
                    ..
                } => {
                    if !matches!(stride, 1 | 2) {
                        return fail(format!("stride {stride} not in {{1,2}}"));
                    }
                    if !matches!(kernel, 1 | 3 | 4) {
                        return fail(format!("kernel {kernel} not in {{1,3,4}}"));
                    }
                    match shape {
                        TensorShape::Image { height, width, .. } => TensorShape::Image {
                            height: crate::nn::conv_out_len(height, stride),
                            width: crate::nn::conv_out_len(width, stride),
                            channels,
                        },
                        _ => return fail("convolution needs an image input".into()),
                    }
                }
                LayerDesc::TConv {
                    kernel,
                    channels,
                    stride,
                    ..
                } => {
                    if !matches!(stride, 1 | 2) {
                        return fail(format!("stride {stride} not in {{1,2}}"));
                    }
                    if !matches!(kernel, 1 | 3 | 4) {
                        return fail(format!("kernel {kernel} not in {{1,3,4}}"));
                    }
                    match shape {
                        TensorShape::Image { height, width, .. } => TensorShape::Image {
                            height: height * stride,
                            width: width * stride,
                            channels,
                        },
                        _ => return fail("transposed convolution needs an image input".into()),
                    }
                }
                LayerDesc::Dense { units, .. } => match shape {
                    TensorShape::Vector { .. } => TensorShape::Vector { dim: units },
                    _ => return fail("fully connected layer needs a vector input".into()),
                },
                LayerDesc::Reshape {
                    height,
                    width,
                    channels,
                } => match shape {
                    TensorShape::Vector { dim } if dim == height * width * channels => {
                        TensorShape::Image {
                            height,
                            width,
                            channels,
                        }
                    }
                    TensorShape::Vector { dim } => {
                        return fail(format!(
                            "{dim} features cannot reshape to {height}x{width}x{channels}"
                        ))
                    }
                    _ => return fail("reshape needs a vector input".into()),
                },
                LayerDesc::Flatten => match shape {
                    TensorShape::Image {
                        height,
                        width,
                        channels,
                    } => TensorShape::Vector {
                        dim: height * width * channels,
                    },
                    _ => return fail("flatten needs an image input".into()),
                },
                LayerDesc::Dropout { prob } => {
                    if !(0.0..1.0).contains(&prob) {
                        return fail(format!("dropout probability {prob} not in [0,1)"));
                    }
                    shape
                }
            };
        }
        Ok(shape)
    }

    pub fn describe(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.to_string()).collect()
    }
}

/// The pair discriminator: an image branch and a code branch whose feature
/// vectors are concatenated into a shared trunk ending in one sigmoid unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image: SeqConfig,
    pub code: SeqConfig,
    pub trunk: SeqConfig,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let img_out = self.image.output_shape()?;
        let code_out = self.code.output_shape()?;
        let (iw, cw) = match (img_out, code_out) {
            (TensorShape::Vector { dim: a }, TensorShape::Vector { dim: b }) => (a, b),
            _ => {
                return Err(Error::config(
                    "discriminator branches must end in feature vectors",
                ))
            }
        };
        match self.trunk.input {
            TensorShape::Vector { dim } if dim == iw + cw => {}
            other => {
                return Err(Error::config(format!(
                    "trunk input {other} does not match concatenated branches ({iw} + {cw})"
                )))
            }
        }
        match self.trunk.output_shape()? {
            TensorShape::Vector { dim: 1 } => Ok(()),
            other => Err(Error::config(format!(
                "discriminator must end in a single unit, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Mnist,
    SvhnCeleba,
}

/// Full architecture description of the three networks for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub latent: LatentSpec,
    pub image: (usize, usize, usize),
    pub generator: SeqConfig,
    pub encoder: SeqConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        let (h, w, c) = self.image;
        match self.generator.output_shape()? {
            TensorShape::Image {
                height,
                width,
                channels,
            } if (height, width, channels) == (h, w, c) => {}
            other => {
                return Err(Error::config(format!(
                    "generator produces {other}, expected image {h}x{w}x{c}"
                )))
            }
        }
        let head = encoder_head_width(&self.latent);
        match self.encoder.output_shape()? {
            TensorShape::Vector { dim } if dim == head => {}
            other => {
                return Err(Error::config(format!(
                    "encoder head is {other}, expected vector {head}"
                )))
            }
        }
        self.discriminator.validate()
    }

    /// Human-readable layer lists, echoed into checkpoint manifests so a
    /// load can verify it is restoring the same architecture.
    pub fn describe(&self) -> Vec<(String, Vec<String>)> {
        vec![
            ("generator".into(), self.generator.describe()),
            ("encoder".into(), self.encoder.describe()),
            (
                "discriminator.image".into(),
                self.discriminator.image.describe(),
            ),
            (
                "discriminator.code".into(),
                self.discriminator.code.describe(),
            ),
            (
                "discriminator.trunk".into(),
                self.discriminator.trunk.describe(),
            ),
        ]
    }
}

/// Width of the encoder's linear output head: `u_hat`, one logit per
/// category of every block, and mean plus log-std per continuous factor.
pub fn encoder_head_width(spec: &LatentSpec) -> usize {
    spec.u_dim + spec.cat_total() + 2 * spec.cont_dim
}

fn conv(kernel: usize, channels: usize, stride: usize) -> LayerDesc {
    LayerDesc::Conv {
        kernel,
        channels,
        stride,
        batch_norm: true,
        activation: Activation::Elu,
    }
}

fn tconv(kernel: usize, channels: usize, stride: usize) -> LayerDesc {
    LayerDesc::TConv {
        kernel,
        channels,
        stride,
        batch_norm: true,
        activation: Activation::Elu,
    }
}

fn dense_bn(units: usize) -> LayerDesc {
    LayerDesc::Dense {
        units,
        batch_norm: true,
        activation: Activation::Elu,
    }
}

const DISC_DROPOUT: f64 = 0.3;

fn drop() -> LayerDesc {
    LayerDesc::Dropout { prob: DISC_DROPOUT }
}

/// The compact family: a three-step deconvolution generator (x4 spatial
/// upscaling), a three-convolution encoder, and two-convolution
/// discriminator branches. Accepts any square image whose side is a
/// multiple of 4; at 28x28 the generator stem is FC 3136 -> 7x7x64.
pub fn build_mnist_family(spec: &LatentSpec, image: (usize, usize, usize)) -> Result<ModelConfig> {
    let (h, w, c) = image;
    if h != w || h % 4 != 0 || h < 8 {
        return Err(Error::config(format!(
            "this family needs a square image with side a multiple of 4, got {h}x{w}"
        )));
    }
    spec.validate()?;
    let base = h / 4;
    let total = spec.total_dim();
    let generator = SeqConfig {
        input: TensorShape::Vector { dim: total },
        layers: vec![
            dense_bn(base * base * 64),
            LayerDesc::Reshape {
                height: base,
                width: base,
                channels: 64,
            },
            tconv(4, 128, 2),
            tconv(4, 64, 1),
            LayerDesc::TConv {
                kernel: 4,
                channels: c,
                stride: 2,
                batch_norm: false,
                activation: Activation::Sigmoid,
            },
        ],
    };
    let encoder = SeqConfig {
        input: TensorShape::Image {
            height: h,
            width: w,
            channels: c,
        },
        layers: vec![
            conv(3, 32, 1),
            conv(3, 64, 2),
            conv(3, 128, 2),
            LayerDesc::Flatten,
            dense_bn(1024),
            LayerDesc::Dense {
                units: encoder_head_width(spec),
                batch_norm: false,
                activation: Activation::Linear,
            },
        ],
    };
    let discriminator = DiscriminatorConfig {
        image: SeqConfig {
            input: TensorShape::Image {
                height: h,
                width: w,
                channels: c,
            },
            layers: vec![
                conv(3, 64, 2),
                drop(),
                conv(3, 128, 2),
                drop(),
                LayerDesc::Flatten,
                dense_bn(512),
                drop(),
            ],
        },
        code: SeqConfig {
            input: TensorShape::Vector { dim: total },
            layers: vec![
                LayerDesc::Reshape {
                    height: 1,
                    width: 1,
                    channels: total,
                },
                conv(1, 64, 1),
                drop(),
                conv(1, 128, 1),
                drop(),
                LayerDesc::Flatten,
                dense_bn(512),
                drop(),
            ],
        },
        trunk: SeqConfig {
            input: TensorShape::Vector { dim: 1024 },
            layers: vec![
                dense_bn(1024),
                drop(),
                LayerDesc::Dense {
                    units: 1,
                    batch_norm: false,
                    activation: Activation::Sigmoid,
                },
            ],
        },
    };
    let config = ModelConfig {
        family: Family::Mnist,
        latent: spec.clone(),
        image,
        generator,
        encoder,
        discriminator,
    };
    config.validate()?;
    Ok(config)
}

/// The deeper family used for 32x32 color images (and larger crops with a
/// side divisible by 8): four-step deconvolution generator, five-convolution
/// encoder, three-convolution discriminator branches.
pub fn build_svhn_celeba_family(
    spec: &LatentSpec,
    image: (usize, usize, usize),
) -> Result<ModelConfig> {
    let (h, w, c) = image;
    if h != w || h % 8 != 0 || h < 16 {
        return Err(Error::config(format!(
            "this family needs a square image with side a multiple of 8, got {h}x{w}"
        )));
    }
    spec.validate()?;
    let base = h / 8;
    let total = spec.total_dim();
    let generator = SeqConfig {
        input: TensorShape::Vector { dim: total },
        layers: vec![
            dense_bn(base * base * 128),
            LayerDesc::Reshape {
                height: base,
                width: base,
                channels: 128,
            },
            tconv(4, 128, 2),
            tconv(4, 64, 2),
            tconv(4, 32, 2),
            LayerDesc::TConv {
                kernel: 3,
                channels: c,
                stride: 1,
                batch_norm: false,
                activation: Activation::Sigmoid,
            },
        ],
    };
    let encoder = SeqConfig {
        input: TensorShape::Image {
            height: h,
            width: w,
            channels: c,
        },
        layers: vec![
            conv(3, 32, 1),
            conv(3, 64, 2),
            conv(3, 128, 1),
            conv(3, 256, 2),
            conv(3, 512, 2),
            LayerDesc::Flatten,
            dense_bn(1024),
            LayerDesc::Dense {
                units: encoder_head_width(spec),
                batch_norm: false,
                activation: Activation::Linear,
            },
        ],
    };
    let discriminator = DiscriminatorConfig {
        image: SeqConfig {
            input: TensorShape::Image {
                height: h,
                width: w,
                channels: c,
            },
            layers: vec![
                conv(4, 64, 2),
                drop(),
                conv(4, 128, 2),
                drop(),
                conv(4, 256, 2),
                drop(),
                LayerDesc::Flatten,
                dense_bn(1024),
                drop(),
            ],
        },
        code: SeqConfig {
            input: TensorShape::Vector { dim: total },
            layers: vec![
                LayerDesc::Reshape {
                    height: 1,
                    width: 1,
                    channels: total,
                },
                conv(1, 64, 1),
                drop(),
                conv(1, 128, 1),
                drop(),
                conv(1, 256, 1),
                drop(),
                LayerDesc::Flatten,
                dense_bn(1024),
                drop(),
            ],
        },
        trunk: SeqConfig {
            input: TensorShape::Vector { dim: 2048 },
            layers: vec![
                dense_bn(1024),
                drop(),
                LayerDesc::Dense {
                    units: 1,
                    batch_norm: false,
                    activation: Activation::Sigmoid,
                },
            ],
        },
    };
    let config = ModelConfig {
        family: Family::SvhnCeleba,
        latent: spec.clone(),
        image,
        generator,
        encoder,
        discriminator,
    };
    config.validate()?;
    Ok(config)
}

/// Builds the family appropriate for a dataset preset.
pub fn build_family(
    family: Family,
    spec: &LatentSpec,
    image: (usize, usize, usize),
) -> Result<ModelConfig> {
    match family {
        Family::Mnist => build_mnist_family(spec, image),
        Family::SvhnCeleba => build_svhn_celeba_family(spec, image),
    }
}
