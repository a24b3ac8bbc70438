//! Instantiated networks: the generator `G: Z -> X`, the encoder
//! `E: X -> Z`-statistics, and the pair discriminator `D: (X, Z) -> (0,1)`.

use crate::error::{Error, Result};
use crate::latent::LatentSpec;
use crate::netspec::{Activation, LayerDesc, ModelConfig, SeqConfig, TensorShape};
use crate::nn::{
    Act, BatchNorm, BatchStats, Conv, Dense, Dropout, Feat, Layer, NetGrads, Phase, Scalar,
    SeqCache, SequentialNet, TConv,
};
use crate::Rng;
use ndarray::{s, Array1, Array2, Array4, Axis};
use rand_distr::{Distribution, Normal};

/// Encoder log-std head is clamped to this range to keep the Gaussian
/// likelihood bounded.
pub const LOGSTD_MIN: f64 = -5.0;
pub const LOGSTD_MAX: f64 = 2.0;

/// Standard deviation of the Gaussian weight initialization.
const INIT_STD: f64 = 0.02;

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut orow, lrow) in out.rows_mut().into_iter().zip(logits.rows()) {
        let max = lrow.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &l) in orow.iter_mut().zip(lrow.iter()) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Backward through row-wise softmax: given probabilities and the gradient
/// with respect to them, returns the gradient with respect to the logits.
pub fn softmax_grad_logits<F: Scalar>(probs: &Array2<F>, gprobs: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut orow, prow), grow) in out
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(gprobs.rows())
    {
        let dot: F = prow
            .iter()
            .zip(grow.iter())
            .map(|(&p, &g)| p * g)
            .fold(F::zero(), |a, b| a + b);
        for (o, (&p, &g)) in orow.iter_mut().zip(prow.iter().zip(grow.iter())) {
            *o = p * (g - dot);
        }
    }
    out
}

pub fn init_seq<F: Scalar>(cfg: &SeqConfig, rng: &mut Rng) -> Result<SequentialNet<F>> {
    cfg.output_shape()?;
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let draw = |n: usize, rng: &mut Rng| -> Vec<F> {
        (0..n).map(|_| F::from_f64(normal.sample(rng))).collect()
    };
    let mut layers = Vec::new();
    let mut shape = cfg.input;
    for desc in &cfg.layers {
        match *desc {
            LayerDesc::Dense {
                units,
                batch_norm,
                activation,
            } => {
                let d_in = match shape {
                    TensorShape::Vector { dim } => dim,
                    _ => unreachable!("validated above"),
                };
                layers.push(Layer::Dense(Dense {
                    w: Array2::from_shape_vec((d_in, units), draw(d_in * units, rng)).unwrap(),
                    b: Array1::zeros(units),
                }));
                if batch_norm {
                    layers.push(Layer::Norm(BatchNorm::new(units)));
                }
                push_act(&mut layers, activation);
                shape = TensorShape::Vector { dim: units };
            }
            LayerDesc::Conv {
                kernel,
                channels,
                stride,
                batch_norm,
                activation,
            } => {
                let (h, w, ci) = match shape {
                    TensorShape::Image {
                        height,
                        width,
                        channels,
                    } => (height, width, channels),
                    _ => unreachable!("validated above"),
                };
                layers.push(Layer::Conv(Conv {
                    w: Array4::from_shape_vec(
                        (kernel, kernel, ci, channels),
                        draw(kernel * kernel * ci * channels, rng),
                    )
                    .unwrap(),
                    b: Array1::zeros(channels),
                    stride,
                }));
                if batch_norm {
                    layers.push(Layer::Norm(BatchNorm::new(channels)));
                }
                push_act(&mut layers, activation);
                shape = TensorShape::Image {
                    height: crate::nn::conv_out_len(h, stride),
                    width: crate::nn::conv_out_len(w, stride),
                    channels,
                };
            }
            LayerDesc::TConv {
                kernel,
                channels,
                stride,
                batch_norm,
                activation,
            } => {
                let (h, w, ci) = match shape {
                    TensorShape::Image {
                        height,
                        width,
                        channels,
                    } => (height, width, channels),
                    _ => unreachable!("validated above"),
                };
                layers.push(Layer::TConv(TConv {
                    w: Array4::from_shape_vec(
                        (kernel, kernel, channels, ci),
                        draw(kernel * kernel * channels * ci, rng),
                    )
                    .unwrap(),
                    b: Array1::zeros(channels),
                    stride,
                }));
                if batch_norm {
                    layers.push(Layer::Norm(BatchNorm::new(channels)));
                }
                push_act(&mut layers, activation);
                shape = TensorShape::Image {
                    height: h * stride,
                    width: w * stride,
                    channels,
                };
            }
            LayerDesc::Reshape {
                height,
                width,
                channels,
            } => {
                layers.push(Layer::Reshape {
                    h: height,
                    w: width,
                    c: channels,
                });
                shape = TensorShape::Image {
                    height,
                    width,
                    channels,
                };
            }
            LayerDesc::Flatten => {
                let dim = match shape {
                    TensorShape::Image {
                        height,
                        width,
                        channels,
                    } => height * width * channels,
                    _ => unreachable!("validated above"),
                };
                layers.push(Layer::Flatten);
                shape = TensorShape::Vector { dim };
            }
            LayerDesc::Dropout { prob } => {
                layers.push(Layer::Dropout(Dropout { p: prob }));
            }
        }
    }
    Ok(SequentialNet::new(layers))
}

fn push_act<F>(layers: &mut Vec<Layer<F>>, activation: Activation) {
    match activation {
        Activation::Elu => layers.push(Layer::Act(Act::Elu)),
        Activation::Sigmoid => layers.push(Layer::Act(Act::Sigmoid)),
        Activation::Tanh => layers.push(Layer::Act(Act::Tanh)),
        Activation::Linear => {}
    }
}

fn with_role(role: &str, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{role}: {msg}")),
        Error::InvalidArgument(msg) => Error::InvalidArgument(format!("{role}: {msg}")),
        Error::Config(msg) => Error::Config(format!("{role}: {msg}")),
        other => other,
    }
}

/// Deconvolutional generator: flat latent codes in, images in [0,1] out.
#[derive(Debug, Clone)]
pub struct Generator<F> {
    pub net: SequentialNet<F>,
    pub in_dim: usize,
    pub out_shape: (usize, usize, usize),
}

#[derive(Debug)]
pub struct GenFwd<F> {
    pub images: Array4<F>,
    pub cache: Option<SeqCache<F>>,
    pub stats: Vec<BatchStats<F>>,
}

impl<F: Scalar> Generator<F> {
    pub fn forward(&self, codes: &Array2<F>, phase: Phase, want_cache: bool) -> Result<GenFwd<F>> {
        if codes.ncols() != self.in_dim {
            return Err(Error::invalid(format!(
                "generator expects codes of width {}, got {}",
                self.in_dim,
                codes.ncols()
            )));
        }
        let fwd = self
            .net
            .forward(Feat::M(codes.clone()), phase, None, want_cache)
            .map_err(|e| with_role("generator", e))?;
        Ok(GenFwd {
            images: fwd.out.into_t()?,
            cache: fwd.cache,
            stats: fwd.stats,
        })
    }

    /// Backward from an image cotangent to parameter gradients (when a sink
    /// is given) and the cotangent of the input codes.
    pub fn backward(
        &self,
        cache: &SeqCache<F>,
        g_images: Array4<F>,
        grads: Option<&mut NetGrads<F>>,
    ) -> Result<Array2<F>> {
        self.net
            .backward(cache, Feat::T(g_images), grads)
            .map_err(|e| with_role("generator", e))?
            .into_m()
    }
}

/// Statistics the encoder produces for one image batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput<F> {
    pub u_hat: Array2<F>,
    pub cat_logits: Vec<Array2<F>>,
    pub cont_mean: Array2<F>,
    pub cont_logstd: Array2<F>,
}

impl<F: Scalar> EncoderOutput<F> {
    pub fn cat_probs(&self) -> Vec<Array2<F>> {
        self.cat_logits.iter().map(softmax_rows).collect()
    }

    pub fn batch_len(&self) -> usize {
        self.u_hat.nrows()
    }
}

/// Cotangents matching `EncoderOutput`, all optional so loss code only
/// touches the parts it uses.
#[derive(Debug, Clone)]
pub struct EncoderOutputGrads<F> {
    pub u_hat: Option<Array2<F>>,
    pub cat_logits: Vec<Option<Array2<F>>>,
    pub cont_mean: Option<Array2<F>>,
    pub cont_logstd: Option<Array2<F>>,
}

impl<F: Scalar> EncoderOutputGrads<F> {
    pub fn zero_shaped(spec: &LatentSpec) -> Self {
        EncoderOutputGrads {
            u_hat: None,
            cat_logits: vec![None; spec.cat_dims.len()],
            cont_mean: None,
            cont_logstd: None,
        }
    }

    fn merge_part(dst: &mut Option<Array2<F>>, src: Option<&Array2<F>>) {
        if let Some(s) = src {
            match dst {
                Some(d) => *d += s,
                None => *dst = Some(s.clone()),
            }
        }
    }

    /// Accumulates another set of cotangents into this one.
    pub fn merge(&mut self, other: &EncoderOutputGrads<F>) {
        Self::merge_part(&mut self.u_hat, other.u_hat.as_ref());
        for (d, s) in self.cat_logits.iter_mut().zip(&other.cat_logits) {
            Self::merge_part(d, s.as_ref());
        }
        Self::merge_part(&mut self.cont_mean, other.cont_mean.as_ref());
        Self::merge_part(&mut self.cont_logstd, other.cont_logstd.as_ref());
    }

    /// Multiplies every present cotangent by a constant.
    pub fn scale(&mut self, s: F) {
        let apply = |part: &mut Option<Array2<F>>| {
            if let Some(a) = part {
                a.mapv_inplace(|v| v * s);
            }
        };
        apply(&mut self.u_hat);
        for block in &mut self.cat_logits {
            apply(block);
        }
        apply(&mut self.cont_mean);
        apply(&mut self.cont_logstd);
    }
}

/// Convolutional encoder with a structured head: tanh-bounded `u_hat`,
/// raw categorical logits per block, tanh-bounded continuous means, and
/// clamped log-stds.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub net: SequentialNet<F>,
    pub spec: LatentSpec,
}

#[derive(Debug)]
pub struct EncFwd<F> {
    pub out: EncoderOutput<F>,
    pub cache: Option<SeqCache<F>>,
    pub stats: Vec<BatchStats<F>>,
}

impl<F: Scalar> Encoder<F> {
    pub fn forward(&self, images: &Array4<F>, phase: Phase, want_cache: bool) -> Result<EncFwd<F>> {
        let fwd = self
            .net
            .forward(Feat::T(images.clone()), phase, None, want_cache)
            .map_err(|e| with_role("encoder", e))?;
        let head = fwd.out.into_m()?;
        let spec = &self.spec;
        let mut pos = 0;
        let take = |head: &Array2<F>, pos: &mut usize, w: usize| -> Array2<F> {
            let part = head.slice(s![.., *pos..*pos + w]).to_owned();
            *pos += w;
            part
        };
        let u_hat = take(&head, &mut pos, spec.u_dim).mapv(|x| x.tanh());
        let cat_logits: Vec<Array2<F>> = spec
            .cat_dims
            .iter()
            .map(|&k| take(&head, &mut pos, k))
            .collect();
        let cont_mean = take(&head, &mut pos, spec.cont_dim).mapv(|x| x.tanh());
        let lo = F::from_f64(LOGSTD_MIN);
        let hi = F::from_f64(LOGSTD_MAX);
        let cont_logstd = take(&head, &mut pos, spec.cont_dim).mapv(|x| x.max(lo).min(hi));
        Ok(EncFwd {
            out: EncoderOutput {
                u_hat,
                cat_logits,
                cont_mean,
                cont_logstd,
            },
            cache: fwd.cache,
            stats: fwd.stats,
        })
    }

    /// Backward through the head activations and the backbone. Returns the
    /// cotangent of the input images.
    pub fn backward(
        &self,
        cache: &SeqCache<F>,
        out: &EncoderOutput<F>,
        g: &EncoderOutputGrads<F>,
        grads: Option<&mut NetGrads<F>>,
    ) -> Result<Array4<F>> {
        let raw_head = cache.output.as_m()?;
        let n = raw_head.nrows();
        let spec = &self.spec;
        let mut ghead = Array2::<F>::zeros((n, crate::netspec::encoder_head_width(spec)));
        let mut pos = 0;
        if let Some(gu) = &g.u_hat {
            let mut dst = ghead.slice_mut(s![.., pos..pos + spec.u_dim]);
            for ((d, &gv), &y) in dst.iter_mut().zip(gu.iter()).zip(out.u_hat.iter()) {
                *d = gv * (F::one() - y * y);
            }
        }
        pos += spec.u_dim;
        for (b, &k) in spec.cat_dims.iter().enumerate() {
            if let Some(gl) = &g.cat_logits[b] {
                ghead.slice_mut(s![.., pos..pos + k]).assign(gl);
            }
            pos += k;
        }
        if let Some(gm) = &g.cont_mean {
            let mut dst = ghead.slice_mut(s![.., pos..pos + spec.cont_dim]);
            for ((d, &gv), &y) in dst.iter_mut().zip(gm.iter()).zip(out.cont_mean.iter()) {
                *d = gv * (F::one() - y * y);
            }
        }
        pos += spec.cont_dim;
        if let Some(gs) = &g.cont_logstd {
            let lo = F::from_f64(LOGSTD_MIN);
            let hi = F::from_f64(LOGSTD_MAX);
            let raw = raw_head.slice(s![.., pos..pos + spec.cont_dim]);
            let mut dst = ghead.slice_mut(s![.., pos..pos + spec.cont_dim]);
            for ((d, &gv), &x) in dst.iter_mut().zip(gs.iter()).zip(raw.iter()) {
                *d = if x > lo && x < hi { gv } else { F::zero() };
            }
        }
        self.net
            .backward(cache, Feat::M(ghead), grads)
            .map_err(|e| with_role("encoder", e))?
            .into_t()
    }
}

/// Pair discriminator: image branch and code branch (the flat code viewed
/// as a 1x1 feature map), concatenated into a shared trunk.
#[derive(Debug, Clone)]
pub struct Discriminator<F> {
    pub image: SequentialNet<F>,
    pub code: SequentialNet<F>,
    pub trunk: SequentialNet<F>,
}

#[derive(Debug)]
pub struct DiscCache<F> {
    pub image: SeqCache<F>,
    pub code: SeqCache<F>,
    pub trunk: SeqCache<F>,
    image_width: usize,
}

#[derive(Debug, Default)]
pub struct DiscStats<F> {
    pub image: Vec<BatchStats<F>>,
    pub code: Vec<BatchStats<F>>,
    pub trunk: Vec<BatchStats<F>>,
}

#[derive(Debug, Clone)]
pub struct DiscGrads<F> {
    pub image: NetGrads<F>,
    pub code: NetGrads<F>,
    pub trunk: NetGrads<F>,
}

impl<F: Scalar> DiscGrads<F> {
    pub fn zeros_of(d: &Discriminator<F>) -> Self {
        DiscGrads {
            image: NetGrads::zeros_of(&d.image),
            code: NetGrads::zeros_of(&d.code),
            trunk: NetGrads::zeros_of(&d.trunk),
        }
    }
}

#[derive(Debug)]
pub struct DiscFwd<F> {
    pub probs: Array1<F>,
    pub cache: Option<DiscCache<F>>,
    pub stats: DiscStats<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn forward(
        &self,
        images: &Array4<F>,
        codes: &Array2<F>,
        phase: Phase,
        mut rng: Option<&mut Rng>,
        want_cache: bool,
    ) -> Result<DiscFwd<F>> {
        if images.shape()[0] != codes.nrows() {
            return Err(Error::invalid(
                "discriminator image and code batches differ in length",
            ));
        }
        let img = self
            .image
            .forward(
                Feat::T(images.clone()),
                phase,
                rng.as_deref_mut(),
                want_cache,
            )
            .map_err(|e| with_role("discriminator image branch", e))?;
        let code = self
            .code
            .forward(
                Feat::M(codes.clone()),
                phase,
                rng.as_deref_mut(),
                want_cache,
            )
            .map_err(|e| with_role("discriminator code branch", e))?;
        let img_feat = img.out.into_m()?;
        let code_feat = code.out.into_m()?;
        let image_width = img_feat.ncols();
        let joint = ndarray::concatenate(Axis(1), &[img_feat.view(), code_feat.view()])
            .expect("row counts match");
        let trunk = self
            .trunk
            .forward(Feat::M(joint), phase, rng.as_deref_mut(), want_cache)
            .map_err(|e| with_role("discriminator trunk", e))?;
        let probs = trunk.out.as_m()?.column(0).to_owned();
        let cache = match (img.cache, code.cache, trunk.cache) {
            (Some(i), Some(c), Some(t)) => Some(DiscCache {
                image: i,
                code: c,
                trunk: t,
                image_width,
            }),
            _ => None,
        };
        Ok(DiscFwd {
            probs,
            cache,
            stats: DiscStats {
                image: img.stats,
                code: code.stats,
                trunk: trunk.stats,
            },
        })
    }

    /// Backward from the probability cotangent. Returns cotangents of the
    /// input images and codes.
    pub fn backward(
        &self,
        cache: &DiscCache<F>,
        g_probs: &Array1<F>,
        grads: Option<&mut DiscGrads<F>>,
    ) -> Result<(Array4<F>, Array2<F>)> {
        let n = g_probs.len();
        let gout = Array2::from_shape_vec((n, 1), g_probs.to_vec()).unwrap();
        let (gi, gc, gt) = match grads {
            Some(g) => (
                Some(&mut g.image),
                Some(&mut g.code),
                Some(&mut g.trunk),
            ),
            None => (None, None, None),
        };
        let g_joint = self
            .trunk
            .backward(&cache.trunk, Feat::M(gout), gt)
            .map_err(|e| with_role("discriminator trunk", e))?
            .into_m()?;
        let g_img_feat = g_joint.slice(s![.., ..cache.image_width]).to_owned();
        let g_code_feat = g_joint.slice(s![.., cache.image_width..]).to_owned();
        let g_images = self
            .image
            .backward(&cache.image, Feat::M(g_img_feat), gi)
            .map_err(|e| with_role("discriminator image branch", e))?
            .into_t()?;
        let g_codes = self
            .code
            .backward(&cache.code, Feat::M(g_code_feat), gc)
            .map_err(|e| with_role("discriminator code branch", e))?
            .into_m()?;
        Ok((g_images, g_codes))
    }

    pub fn apply_batch_stats(&mut self, stats: &DiscStats<F>) {
        self.image.apply_batch_stats(&stats.image);
        self.code.apply_batch_stats(&stats.code);
        self.trunk.apply_batch_stats(&stats.trunk);
    }
}

/// The generator/encoder/discriminator triple for one run.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub gen: Generator<F>,
    pub enc: Encoder<F>,
    pub disc: Discriminator<F>,
    pub config: ModelConfig,
}

impl<F: Scalar> Model<F> {
    /// Initializes all three networks from the architecture description.
    /// Weights are zero-mean Gaussian (std 0.02), biases zero; draw order is
    /// fixed (generator, encoder, discriminator image/code/trunk).
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model<F>> {
        config.validate()?;
        let gen_net = init_seq(&config.generator, rng)?;
        let enc_net = init_seq(&config.encoder, rng)?;
        let disc = Discriminator {
            image: init_seq(&config.discriminator.image, rng)?,
            code: init_seq(&config.discriminator.code, rng)?,
            trunk: init_seq(&config.discriminator.trunk, rng)?,
        };
        Ok(Model {
            gen: Generator {
                net: gen_net,
                in_dim: config.latent.total_dim(),
                out_shape: config.image,
            },
            enc: Encoder {
                net: enc_net,
                spec: config.latent.clone(),
            },
            disc,
            config,
        })
    }

    /// Visits all persistent arrays (parameters and normalization running
    /// statistics) with stable fully-qualified names.
    pub fn for_each_state(&self, f: &mut dyn FnMut(String, &[F])) {
        self.gen
            .net
            .for_each_state(&mut |name, s| f(format!("generator.{name}"), s));
        self.enc
            .net
            .for_each_state(&mut |name, s| f(format!("encoder.{name}"), s));
        self.disc
            .image
            .for_each_state(&mut |name, s| f(format!("disc.image.{name}"), s));
        self.disc
            .code
            .for_each_state(&mut |name, s| f(format!("disc.code.{name}"), s));
        self.disc
            .trunk
            .for_each_state(&mut |name, s| f(format!("disc.trunk.{name}"), s));
    }

    pub fn for_each_state_mut(&mut self, f: &mut dyn FnMut(String, &mut [F])) {
        self.gen
            .net
            .for_each_state_mut(&mut |name, s| f(format!("generator.{name}"), s));
        self.enc
            .net
            .for_each_state_mut(&mut |name, s| f(format!("encoder.{name}"), s));
        self.disc
            .image
            .for_each_state_mut(&mut |name, s| f(format!("disc.image.{name}"), s));
        self.disc
            .code
            .for_each_state_mut(&mut |name, s| f(format!("disc.code.{name}"), s));
        self.disc
            .trunk
            .for_each_state_mut(&mut |name, s| f(format!("disc.trunk.{name}"), s));
    }
}
