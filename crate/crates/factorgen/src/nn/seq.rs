//! Sequential network container: forward with caches, backward with
//! gradient accumulation, and uniform parameter/state traversal.

use super::layers::{Act, BatchNorm, Conv, Dense, Dropout, TConv};
use super::{Feat, Phase, Scalar};
use crate::error::{Error, Result};
use crate::Rng;
use ndarray::{Array1, Array2, Array4, ArrayView2};

#[derive(Debug, Clone)]
pub enum Layer<F> {
    Dense(Dense<F>),
    Conv(Conv<F>),
    TConv(TConv<F>),
    Norm(BatchNorm<F>),
    Act(Act),
    Dropout(Dropout),
    Reshape { h: usize, w: usize, c: usize },
    Flatten,
}

impl<F> Layer<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::TConv(_) => "tconv",
            Layer::Norm(_) => "norm",
            Layer::Act(_) => "act",
            Layer::Dropout(_) => "dropout",
            Layer::Reshape { .. } => "reshape",
            Layer::Flatten => "flatten",
        }
    }
}

/// Per-layer auxiliary state captured during a cached forward pass.
#[derive(Debug, Clone)]
pub enum LayerExtra<F> {
    None,
    Norm { mean: Array1<F>, var: Array1<F> },
    Mask(Vec<F>),
}

/// Everything backward needs: the input to every layer, per-layer extras,
/// the final output, and the phase the pass ran in.
#[derive(Debug, Clone)]
pub struct SeqCache<F> {
    pub inputs: Vec<Feat<F>>,
    pub extras: Vec<LayerExtra<F>>,
    pub output: Feat<F>,
    pub phase: Phase,
}

/// Batch statistics observed by one normalization layer during a training
/// forward pass; folded into running averages by `apply_batch_stats`.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub layer: usize,
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

/// Flattened parameter gradients, aligned with the layer list.
#[derive(Debug, Clone)]
pub enum LayerGrads<F> {
    None,
    Pair { a: Vec<F>, b: Vec<F> },
}

#[derive(Debug, Clone)]
pub struct NetGrads<F> {
    pub layers: Vec<LayerGrads<F>>,
}

impl<F: Scalar> NetGrads<F> {
    pub fn zeros_of(net: &SequentialNet<F>) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerGrads::Pair {
                    a: vec![F::zero(); d.w.len()],
                    b: vec![F::zero(); d.b.len()],
                },
                Layer::Conv(c) => LayerGrads::Pair {
                    a: vec![F::zero(); c.w.len()],
                    b: vec![F::zero(); c.b.len()],
                },
                Layer::TConv(c) => LayerGrads::Pair {
                    a: vec![F::zero(); c.w.len()],
                    b: vec![F::zero(); c.b.len()],
                },
                Layer::Norm(n) => LayerGrads::Pair {
                    a: vec![F::zero(); n.gamma.len()],
                    b: vec![F::zero(); n.beta.len()],
                },
                _ => LayerGrads::None,
            })
            .collect();
        NetGrads { layers }
    }

    fn acc(&mut self, idx: usize, ga: impl IntoIterator<Item = F>, gb: impl IntoIterator<Item = F>) {
        if let LayerGrads::Pair { a, b } = &mut self.layers[idx] {
            for (slot, g) in a.iter_mut().zip(ga) {
                *slot += g;
            }
            for (slot, g) in b.iter_mut().zip(gb) {
                *slot += g;
            }
        }
    }

    /// Visits gradient slices in the same order as `for_each_param_mut`.
    pub fn for_each(&self, f: &mut dyn FnMut(&[F])) {
        for lg in &self.layers {
            if let LayerGrads::Pair { a, b } = lg {
                f(a);
                f(b);
            }
        }
    }

    /// Gradient slices in parameter-visitation order.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for lg in &self.layers {
            if let LayerGrads::Pair { a, b } = lg {
                out.push(a.as_slice());
                out.push(b.as_slice());
            }
        }
        out
    }

    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        self.for_each(&mut |s| out.extend_from_slice(s));
        out
    }
}

#[derive(Debug)]
pub struct FwdOut<F> {
    pub out: Feat<F>,
    pub cache: Option<SeqCache<F>>,
    pub stats: Vec<BatchStats<F>>,
}

#[derive(Debug, Clone)]
pub struct SequentialNet<F> {
    pub layers: Vec<Layer<F>>,
}

fn as_2d<F: Scalar>(x: &Feat<F>) -> (ArrayView2<'_, F>, Option<(usize, usize, usize, usize)>) {
    match x {
        Feat::M(a) => (a.view(), None),
        Feat::T(a) => {
            let (n, h, w, c) = a.dim();
            let v = a
                .view()
                .into_shape_with_order((n * h * w, c))
                .expect("activations are contiguous");
            (v, Some((n, h, w, c)))
        }
    }
}

fn from_2d<F: Scalar>(m: Array2<F>, dims: Option<(usize, usize, usize, usize)>) -> Feat<F> {
    match dims {
        None => Feat::M(m),
        Some(d) => {
            let (v, _) = m.into_raw_vec_and_offset();
            Feat::T(Array4::from_shape_vec(d, v).expect("shape preserved"))
        }
    }
}

fn map_elementwise<F: Scalar>(x: &Feat<F>, f: impl Fn(F) -> F) -> Feat<F> {
    match x {
        Feat::M(a) => Feat::M(a.mapv(&f)),
        Feat::T(a) => Feat::T(a.mapv(&f)),
    }
}

fn zip_mask<F: Scalar>(x: &Feat<F>, mask: &[F]) -> Feat<F> {
    let apply = |slice: &[F]| -> Vec<F> {
        slice
            .iter()
            .zip(mask)
            .map(|(&v, &m)| v * m)
            .collect::<Vec<F>>()
    };
    match x {
        Feat::M(a) => {
            let v = apply(a.as_slice().expect("contiguous"));
            Feat::M(Array2::from_shape_vec(a.raw_dim(), v).unwrap())
        }
        Feat::T(a) => {
            let v = apply(a.as_slice().expect("contiguous"));
            Feat::T(Array4::from_shape_vec(a.raw_dim(), v).unwrap())
        }
    }
}

impl<F: Scalar> SequentialNet<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Self {
        SequentialNet { layers }
    }

    /// Runs the stack. In `Train` phase, normalization uses batch statistics
    /// (reported through `FwdOut::stats`, not yet folded into the running
    /// averages) and dropout draws masks from `rng`.
    pub fn forward(
        &self,
        x: Feat<F>,
        phase: Phase,
        mut rng: Option<&mut Rng>,
        want_cache: bool,
    ) -> Result<FwdOut<F>> {
        let mut inputs = Vec::new();
        let mut extras = Vec::new();
        let mut stats = Vec::new();
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut extra = LayerExtra::None;
            let out = match layer {
                Layer::Dense(l) => Feat::M(l.forward(cur.as_m()?)),
                Layer::Conv(l) => Feat::T(l.forward(cur.as_t()?)),
                Layer::TConv(l) => Feat::T(l.forward(cur.as_t()?)),
                Layer::Norm(bn) => {
                    let (v2, dims) = as_2d(&cur);
                    let y = match phase {
                        Phase::Train => {
                            let (mean, var) = BatchNorm::batch_stats(v2);
                            let y = bn.forward_with(v2, &mean, &var);
                            stats.push(BatchStats {
                                layer: i,
                                mean: mean.clone(),
                                var: var.clone(),
                            });
                            extra = LayerExtra::Norm { mean, var };
                            y
                        }
                        Phase::Eval => {
                            let (mean, var) = bn.eval_stats();
                            bn.forward_with(v2, &mean, &var)
                        }
                    };
                    from_2d(y, dims)
                }
                Layer::Act(a) => map_elementwise(&cur, |v| a.apply(v)),
                Layer::Dropout(d) => match phase {
                    Phase::Train => {
                        let rng = rng.as_deref_mut().ok_or_else(|| {
                            Error::invalid("training forward through dropout needs an RNG")
                        })?;
                        let len = cur.iter().count();
                        let mask = d.sample_mask::<F>(len, rng);
                        let y = zip_mask(&cur, &mask);
                        extra = LayerExtra::Mask(mask);
                        y
                    }
                    Phase::Eval => cur.clone(),
                },
                Layer::Reshape { h, w, c } => {
                    let m = cur.as_m()?;
                    let (n, d) = m.dim();
                    if d != h * w * c {
                        return Err(Error::config(format!(
                            "reshape layer {i}: {d} features cannot become {h}x{w}x{c}"
                        )));
                    }
                    let (v, _) = m.clone().into_raw_vec_and_offset();
                    Feat::T(Array4::from_shape_vec((n, *h, *w, *c), v).unwrap())
                }
                Layer::Flatten => {
                    let t = cur.as_t()?;
                    let (n, h, w, c) = t.dim();
                    let (v, _) = t.clone().into_raw_vec_and_offset();
                    Feat::M(Array2::from_shape_vec((n, h * w * c), v).unwrap())
                }
            };
            // Only the arithmetic layers can turn finite inputs non-finite,
            // so checking them covers every layer.
            let needs_check = matches!(
                layer,
                Layer::Dense(_) | Layer::Conv(_) | Layer::TConv(_) | Layer::Norm(_)
            );
            if needs_check && !out.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite activation after layer {i} ({})",
                    layer.kind_name()
                )));
            }
            if want_cache {
                inputs.push(cur);
                extras.push(extra);
            }
            cur = out;
        }
        let cache = want_cache.then(|| SeqCache {
            inputs,
            extras,
            output: cur.clone(),
            phase,
        });
        Ok(FwdOut {
            out: cur,
            cache,
            stats,
        })
    }

    /// Folds collected batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<F>]) {
        for s in stats {
            if let Layer::Norm(bn) = &mut self.layers[s.layer] {
                bn.update_running(&s.mean, &s.var);
            }
        }
    }

    /// Backpropagates `gout` through the cached pass. Parameter gradients
    /// accumulate into `grads` when provided; the return value is the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        cache: &SeqCache<F>,
        gout: Feat<F>,
        mut grads: Option<&mut NetGrads<F>>,
    ) -> Result<Feat<F>> {
        let mut g = gout;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let layer_out = if i + 1 < cache.inputs.len() {
                &cache.inputs[i + 1]
            } else {
                &cache.output
            };
            g = match layer {
                Layer::Dense(l) => {
                    let (gx, gw, gb) = l.backward(input.as_m()?, g.as_m()?);
                    if let Some(sink) = grads.as_deref_mut() {
                        sink.acc(i, gw.into_iter(), gb.into_iter());
                    }
                    Feat::M(gx)
                }
                Layer::Conv(l) => {
                    let (gx, gw, gb) = l.backward(input.as_t()?, g.as_t()?);
                    if let Some(sink) = grads.as_deref_mut() {
                        sink.acc(i, gw.into_iter(), gb.into_iter());
                    }
                    Feat::T(gx)
                }
                Layer::TConv(l) => {
                    let (gx, gw, gb) = l.backward(input.as_t()?, g.as_t()?);
                    if let Some(sink) = grads.as_deref_mut() {
                        sink.acc(i, gw.into_iter(), gb.into_iter());
                    }
                    Feat::T(gx)
                }
                Layer::Norm(bn) => {
                    let (xv, dims) = as_2d(input);
                    let (gv, _) = as_2d(&g);
                    let (gx, dgamma, dbeta) = match (&cache.extras[i], cache.phase) {
                        (LayerExtra::Norm { mean, var }, Phase::Train) => {
                            bn.backward_train(xv, mean, var, gv)
                        }
                        _ => bn.backward_eval(xv, gv),
                    };
                    if let Some(sink) = grads.as_deref_mut() {
                        sink.acc(i, dgamma.into_iter(), dbeta.into_iter());
                    }
                    from_2d(gx, dims)
                }
                Layer::Act(a) => match (layer_out, &g) {
                    (Feat::M(y), Feat::M(gm)) => {
                        Feat::M(ndarray::Zip::from(y).and(gm).map_collect(|&yv, &gv| {
                            a.deriv_from_output(yv) * gv
                        }))
                    }
                    (Feat::T(y), Feat::T(gt)) => {
                        Feat::T(ndarray::Zip::from(y).and(gt).map_collect(|&yv, &gv| {
                            a.deriv_from_output(yv) * gv
                        }))
                    }
                    _ => return Err(Error::invalid("activation cache/grad kind mismatch")),
                },
                Layer::Dropout(_) => match &cache.extras[i] {
                    LayerExtra::Mask(mask) => zip_mask(&g, mask),
                    _ => g,
                },
                Layer::Reshape { .. } => {
                    let m = input.as_m()?;
                    let t = g.as_t()?;
                    let (v, _) = t.clone().into_raw_vec_and_offset();
                    Feat::M(Array2::from_shape_vec(m.raw_dim(), v).unwrap())
                }
                Layer::Flatten => {
                    let t = input.as_t()?;
                    let m = g.as_m()?;
                    let (v, _) = m.clone().into_raw_vec_and_offset();
                    Feat::T(Array4::from_shape_vec(t.raw_dim(), v).unwrap())
                }
            };
        }
        Ok(g)
    }

    /// Visits every trainable parameter tensor as a flat slice, in layer
    /// order (weights before biases, gamma before beta).
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => {
                    f(l.w.as_slice_mut().unwrap());
                    f(l.b.as_slice_mut().unwrap());
                }
                Layer::Conv(l) => {
                    f(l.w.as_slice_mut().unwrap());
                    f(l.b.as_slice_mut().unwrap());
                }
                Layer::TConv(l) => {
                    f(l.w.as_slice_mut().unwrap());
                    f(l.b.as_slice_mut().unwrap());
                }
                Layer::Norm(n) => {
                    f(n.gamma.as_slice_mut().unwrap());
                    f(n.beta.as_slice_mut().unwrap());
                }
                _ => {}
            }
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&[F])) {
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => {
                    f(l.w.as_slice().unwrap());
                    f(l.b.as_slice().unwrap());
                }
                Layer::Conv(l) => {
                    f(l.w.as_slice().unwrap());
                    f(l.b.as_slice().unwrap());
                }
                Layer::TConv(l) => {
                    f(l.w.as_slice().unwrap());
                    f(l.b.as_slice().unwrap());
                }
                Layer::Norm(n) => {
                    f(n.gamma.as_slice().unwrap());
                    f(n.beta.as_slice().unwrap());
                }
                _ => {}
            }
        }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        self.for_each_param(&mut |s| sizes.push(s.len()));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    /// Visits persistent state: parameters plus normalization running
    /// statistics, with stable names for the checkpoint manifest.
    pub fn for_each_state(&self, f: &mut dyn FnMut(String, &[F])) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(l) => {
                    f(format!("{i}.dense.w"), l.w.as_slice().unwrap());
                    f(format!("{i}.dense.b"), l.b.as_slice().unwrap());
                }
                Layer::Conv(l) => {
                    f(format!("{i}.conv.w"), l.w.as_slice().unwrap());
                    f(format!("{i}.conv.b"), l.b.as_slice().unwrap());
                }
                Layer::TConv(l) => {
                    f(format!("{i}.tconv.w"), l.w.as_slice().unwrap());
                    f(format!("{i}.tconv.b"), l.b.as_slice().unwrap());
                }
                Layer::Norm(n) => {
                    f(format!("{i}.norm.gamma"), n.gamma.as_slice().unwrap());
                    f(format!("{i}.norm.beta"), n.beta.as_slice().unwrap());
                    f(format!("{i}.norm.rmean"), n.running_mean.as_slice().unwrap());
                    f(format!("{i}.norm.rvar"), n.running_var.as_slice().unwrap());
                    f(format!("{i}.norm.nupd"), n.updates.as_slice().unwrap());
                }
                _ => {}
            }
        }
    }

    pub fn for_each_state_mut(&mut self, f: &mut dyn FnMut(String, &mut [F])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(l) => {
                    f(format!("{i}.dense.w"), l.w.as_slice_mut().unwrap());
                    f(format!("{i}.dense.b"), l.b.as_slice_mut().unwrap());
                }
                Layer::Conv(l) => {
                    f(format!("{i}.conv.w"), l.w.as_slice_mut().unwrap());
                    f(format!("{i}.conv.b"), l.b.as_slice_mut().unwrap());
                }
                Layer::TConv(l) => {
                    f(format!("{i}.tconv.w"), l.w.as_slice_mut().unwrap());
                    f(format!("{i}.tconv.b"), l.b.as_slice_mut().unwrap());
                }
                Layer::Norm(n) => {
                    f(format!("{i}.norm.gamma"), n.gamma.as_slice_mut().unwrap());
                    f(format!("{i}.norm.beta"), n.beta.as_slice_mut().unwrap());
                    f(
                        format!("{i}.norm.rmean"),
                        n.running_mean.as_slice_mut().unwrap(),
                    );
                    f(
                        format!("{i}.norm.rvar"),
                        n.running_var.as_slice_mut().unwrap(),
                    );
                    f(format!("{i}.norm.nupd"), n.updates.as_slice_mut().unwrap());
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};
    use rand::{Rng as _, SeedableRng};

    fn tiny_net(seed: u64) -> SequentialNet<f64> {
        let mut rng = crate::Rng::seed_from_u64(seed);
        let mut randn = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random::<f64>() * 0.4 - 0.2).collect()
        };
        SequentialNet::new(vec![
            Layer::Dense(Dense {
                w: Array2::from_shape_vec((5, 12), randn(60)).unwrap(),
                b: Array1::from_vec(randn(12)),
            }),
            Layer::Norm(BatchNorm::new(12)),
            Layer::Act(Act::Elu),
            Layer::Reshape { h: 2, w: 2, c: 3 },
            Layer::TConv(TConv {
                w: Array4::from_shape_vec((4, 4, 2, 3), randn(96)).unwrap(),
                b: Array1::from_vec(randn(2)),
                stride: 2,
            }),
            Layer::Norm(BatchNorm::new(2)),
            Layer::Act(Act::Elu),
            Layer::Conv(Conv {
                w: Array4::from_shape_vec((3, 3, 2, 2), randn(36)).unwrap(),
                b: Array1::from_vec(randn(2)),
                stride: 2,
            }),
            Layer::Dropout(Dropout { p: 0.3 }),
            Layer::Flatten,
            Layer::Dense(Dense {
                w: Array2::from_shape_vec((8, 3), randn(24)).unwrap(),
                b: Array1::from_vec(randn(3)),
            }),
            Layer::Act(Act::Sigmoid),
        ])
    }

    fn param_flat(net: &SequentialNet<f64>) -> Vec<f64> {
        let mut v = Vec::new();
        net.for_each_param(&mut |s| v.extend_from_slice(s));
        v
    }

    fn set_param(net: &mut SequentialNet<f64>, idx: usize, value: f64) {
        let mut seen = 0usize;
        net.for_each_param_mut(&mut |s| {
            if idx >= seen && idx < seen + s.len() {
                s[idx - seen] = value;
            }
            seen += s.len();
        });
    }

    /// Loss: fixed random weighting of the outputs, evaluated with a fixed
    /// dropout RNG so it is a deterministic function of the parameters.
    fn loss(net: &SequentialNet<f64>, x: &Array2<f64>, cot: &[f64]) -> f64 {
        let mut rng = crate::Rng::seed_from_u64(77);
        let out = net
            .forward(Feat::M(x.clone()), Phase::Train, Some(&mut rng), false)
            .unwrap()
            .out;
        out.iter().zip(cot).map(|(&y, &w)| y * w).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let net = tiny_net(5);
        let x = arr2(&[
            [0.1, -0.2, 0.3, 0.05, -0.4],
            [0.5, 0.2, -0.3, 0.15, 0.25],
            [-0.1, 0.4, 0.2, -0.35, 0.0],
        ]);
        let cot: Vec<f64> = (0..9).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();

        // Analytic gradients with the same fixed dropout stream.
        let mut rng = crate::Rng::seed_from_u64(77);
        let fwd = net
            .forward(Feat::M(x.clone()), Phase::Train, Some(&mut rng), true)
            .unwrap();
        let gout = Feat::M(Array2::from_shape_vec((3, 3), cot.clone()).unwrap());
        let mut grads = NetGrads::zeros_of(&net);
        net.backward(fwd.cache.as_ref().unwrap(), gout, Some(&mut grads))
            .unwrap();
        let analytic = grads.flat();

        let theta = param_flat(&net);
        assert_eq!(theta.len(), analytic.len());
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..theta.len() {
            let mut plus = net.clone();
            set_param(&mut plus, i, theta[i] + h);
            let mut minus = net.clone();
            set_param(&mut minus, i, theta[i] - h);
            let num = (loss(&plus, &x, &cot) - loss(&minus, &x, &cot)) / (2.0 * h);
            let denom = num.abs().max(analytic[i].abs()).max(1e-6);
            max_rel = max_rel.max((num - analytic[i]).abs() / denom);
        }
        // Central differences pick up O(h) noise wherever an ELU kink sits
        // within h of zero, so the bar is looser than for smooth paths.
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let net = tiny_net(11);
        let x = arr2(&[[0.2, -0.1, 0.4, 0.3, -0.2], [0.0, 0.1, -0.3, 0.2, 0.5]]);
        let cot: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) / 3.0).collect();

        let mut rng = crate::Rng::seed_from_u64(77);
        let fwd = net
            .forward(Feat::M(x.clone()), Phase::Train, Some(&mut rng), true)
            .unwrap();
        let gout = Feat::M(Array2::from_shape_vec((2, 3), cot.clone()).unwrap());
        let gin = net
            .backward(fwd.cache.as_ref().unwrap(), gout, None)
            .unwrap()
            .into_m()
            .unwrap();

        let h = 1e-5;
        for i in 0..2 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = (loss(&net, &xp, &cot) - loss(&net, &xm, &cot)) / (2.0 * h);
                let denom = num.abs().max(gin[[i, j]].abs()).max(1e-6);
                assert!(
                    ((num - gin[[i, j]]) / denom).abs() < 1e-6,
                    "input grad mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn eval_forward_is_pure_and_deterministic() {
        let net = tiny_net(3);
        let x = arr2(&[[0.3, 0.1, -0.2, 0.0, 0.4]]);
        let a = net
            .forward(Feat::M(x.clone()), Phase::Eval, None, false)
            .unwrap()
            .out
            .into_m()
            .unwrap();
        let b = net
            .forward(Feat::M(x.clone()), Phase::Eval, None, false)
            .unwrap()
            .out
            .into_m()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut net = SequentialNet::new(vec![Layer::Norm(BatchNorm::<f64>::new(2))]);
        let x = arr2(&[[1.0, 0.0], [3.0, 0.0]]);
        let fwd = net
            .forward(Feat::M(x), Phase::Train, None, false)
            .unwrap();
        net.apply_batch_stats(&fwd.stats);
        if let Layer::Norm(bn) = &net.layers[0] {
            assert!((bn.running_mean[0] - 0.02).abs() < 1e-12);
            assert!((bn.running_var[0] - 0.01).abs() < 1e-12);
            assert_eq!(bn.updates[0], 1.0);
            // Bias-corrected inference stats equal the single batch seen.
            let (mean, var) = bn.eval_stats();
            assert!((mean[0] - 2.0).abs() < 1e-9);
            assert!((var[0] - 1.0).abs() < 1e-9);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn zeroed_state_maps_zero_input_to_sigmoid_half() {
        let mut net = tiny_net(1);
        net.for_each_state_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
        let x = Array2::<f64>::zeros((2, 5));
        let out = net
            .forward(Feat::M(x), Phase::Eval, None, false)
            .unwrap()
            .out
            .into_m()
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn non_finite_activation_is_reported_with_layer() {
        let mut net = SequentialNet::new(vec![Layer::Dense(Dense {
            w: arr2(&[[f64::INFINITY]]),
            b: arr1(&[0.0]),
        })]);
        if let Layer::Dense(d) = &mut net.layers[0] {
            d.w[[0, 0]] = f64::NAN;
        }
        let err = net
            .forward(Feat::M(arr2(&[[1.0]])), Phase::Eval, None, false)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "{msg}");
    }
}
