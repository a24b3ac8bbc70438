//! Individual layer implementations: forward maps and their backward rules.

use super::conv::{channel_sums, conv2d, conv2d_grad_input, conv2d_grad_weights};
use super::{linalg, Scalar};
use crate::Rng;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng as _;

/// Fully connected layer, `y = x·w + b`.
#[derive(Debug, Clone)]
pub struct Dense<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = linalg::matmul(x.view(), self.w.view());
        y += &self.b;
        y
    }

    /// Returns (gx, gw, gb).
    pub fn backward(&self, x: &Array2<F>, g: &Array2<F>) -> (Array2<F>, Array2<F>, Array1<F>) {
        let gw = linalg::matmul(x.t(), g.view());
        let gb = g.sum_axis(Axis(0));
        let gx = linalg::matmul(g.view(), self.w.t());
        (gx, gw, gb)
    }
}

/// Convolution layer; weights `[kh, kw, c_in, c_out]`.
#[derive(Debug, Clone)]
pub struct Conv<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
}

impl<F: Scalar> Conv<F> {
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        conv2d(x, &self.w, Some(&self.b), self.stride)
    }

    pub fn backward(&self, x: &Array4<F>, g: &Array4<F>) -> (Array4<F>, Array4<F>, Array1<F>) {
        let (kh, kw, _, _) = self.w.dim();
        let (_, h, wd, _) = x.dim();
        let gw = conv2d_grad_weights(x, g, (kh, kw), self.stride);
        let gb = channel_sums(g);
        let gx = conv2d_grad_input(g, &self.w, self.stride, (h, wd));
        (gx, gw, gb)
    }
}

/// Transposed convolution layer; weights `[kh, kw, c_out, c_in]`, the kernel
/// of the adjoint convolution. A stride-s layer scales spatial size by s.
#[derive(Debug, Clone)]
pub struct TConv<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
}

impl<F: Scalar> TConv<F> {
    pub fn out_hw(&self, in_hw: (usize, usize)) -> (usize, usize) {
        (in_hw.0 * self.stride, in_hw.1 * self.stride)
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (_, h, wd, _) = x.dim();
        let mut y = conv2d_grad_input(x, &self.w, self.stride, self.out_hw((h, wd)));
        y += &self.b;
        y
    }

    pub fn backward(&self, x: &Array4<F>, g: &Array4<F>) -> (Array4<F>, Array4<F>, Array1<F>) {
        let (kh, kw, _, _) = self.w.dim();
        let gx = conv2d(g, &self.w, None, self.stride);
        let gw = conv2d_grad_weights(g, x, (kh, kw), self.stride);
        let gb = channel_sums(g);
        (gx, gw, gb)
    }
}

/// Batch normalization over the batch (and spatial axes for image inputs),
/// one statistic per channel/feature.
///
/// Running statistics are bias-corrected exponential moving averages
/// (momentum 0.99): the raw accumulators start at zero and inference
/// divides by `1 - momentum^t`, so short runs see unbiased estimates. The
/// update counter lives in a one-element array so it serializes with the
/// rest of the state.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub updates: Array1<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::zeros(channels),
            updates: Array1::zeros(1),
            momentum: F::from_f64(0.99),
            eps: F::from_f64(1e-5),
        }
    }

    /// Bias-corrected inference statistics. Before any update the layer
    /// falls back to the identity normalization (mean 0, variance 1).
    pub fn eval_stats(&self) -> (Array1<F>, Array1<F>) {
        let t = self.updates[0].to_f64();
        if t < 0.5 {
            return (
                Array1::zeros(self.gamma.len()),
                Array1::ones(self.gamma.len()),
            );
        }
        let c = F::from_f64(1.0 / (1.0 - self.momentum.to_f64().powf(t)));
        (
            self.running_mean.mapv(|m| m * c),
            self.running_var.mapv(|v| v * c),
        )
    }

    /// Per-channel mean and biased variance of a `[rows, channels]` view.
    pub fn batch_stats(x: ArrayView2<F>) -> (Array1<F>, Array1<F>) {
        let rows = F::from_f64(x.nrows() as f64);
        let mean = x.sum_axis(Axis(0)) / rows;
        let mut var = Array1::<F>::zeros(x.ncols());
        for row in x.rows() {
            for (v, (&xi, &mi)) in var.iter_mut().zip(row.iter().zip(mean.iter())) {
                let d = xi - mi;
                *v += d * d;
            }
        }
        var /= rows;
        (mean, var)
    }

    /// Normalizes with the supplied statistics. The affine map is folded
    /// into one scale and shift per channel.
    pub fn forward_with(
        &self,
        x: ArrayView2<F>,
        mean: &Array1<F>,
        var: &Array1<F>,
    ) -> Array2<F> {
        let c = x.ncols();
        let mut scale = Array1::<F>::zeros(c);
        let mut shift = Array1::<F>::zeros(c);
        for j in 0..c {
            let inv = (var[j] + self.eps).sqrt().recip();
            scale[j] = self.gamma[j] * inv;
            shift[j] = self.beta[j] - mean[j] * scale[j];
        }
        let mut y = Array2::zeros(x.raw_dim());
        let (sc, sh) = (
            scale.as_slice().unwrap(),
            shift.as_slice().unwrap(),
        );
        for (mut yr, xr) in y.rows_mut().into_iter().zip(x.rows()) {
            let yr = yr.as_slice_mut().expect("standard layout");
            match xr.as_slice() {
                Some(xs) => {
                    for j in 0..c {
                        yr[j] = xs[j] * sc[j] + sh[j];
                    }
                }
                None => {
                    for (j, &xv) in xr.iter().enumerate() {
                        yr[j] = xv * sc[j] + sh[j];
                    }
                }
            }
        }
        y
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running(&mut self, mean: &Array1<F>, var: &Array1<F>) {
        let m = self.momentum;
        let one_m = F::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(mean.iter()) {
            *r = *r * m + b * one_m;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var.iter()) {
            *r = *r * m + b * one_m;
        }
        self.updates[0] += F::one();
    }

    /// Backward through batch-statistics normalization.
    /// Returns (gx, dgamma, dbeta).
    pub fn backward_train(
        &self,
        x: ArrayView2<F>,
        mean: &Array1<F>,
        var: &Array1<F>,
        g: ArrayView2<F>,
    ) -> (Array2<F>, Array1<F>, Array1<F>) {
        let rows = x.nrows();
        let c = x.ncols();
        let m = F::from_f64(rows as f64);
        let inv: Array1<F> = var.mapv(|v| (v + self.eps).sqrt().recip());
        let mut dbeta = Array1::<F>::zeros(c);
        let mut dgamma = Array1::<F>::zeros(c);
        for (xr, gr) in x.rows().into_iter().zip(g.rows()) {
            for (j, (&xi, &gi)) in xr.iter().zip(gr.iter()).enumerate() {
                let xh = (xi - mean[j]) * inv[j];
                dbeta[j] += gi;
                dgamma[j] += gi * xh;
            }
        }
        // gx = a_j * g + b_j + c_j * x with per-channel coefficients.
        let mut ca = Array1::<F>::zeros(c);
        let mut cb = Array1::<F>::zeros(c);
        let mut cc = Array1::<F>::zeros(c);
        for j in 0..c {
            let gi = self.gamma[j] * inv[j];
            ca[j] = gi;
            cc[j] = -gi * inv[j] * dgamma[j] / m;
            cb[j] = -gi * dbeta[j] / m - cc[j] * mean[j];
        }
        let (ca, cb, cc) = (
            ca.as_slice().unwrap(),
            cb.as_slice().unwrap(),
            cc.as_slice().unwrap(),
        );
        let mut gx = Array2::<F>::zeros(x.raw_dim());
        for ((mut or, xr), gr) in gx.rows_mut().into_iter().zip(x.rows()).zip(g.rows()) {
            let or = or.as_slice_mut().expect("standard layout");
            match (xr.as_slice(), gr.as_slice()) {
                (Some(xs), Some(gs)) => {
                    for j in 0..c {
                        or[j] = ca[j] * gs[j] + cb[j] + cc[j] * xs[j];
                    }
                }
                _ => {
                    for (j, (&xi, &gi)) in xr.iter().zip(gr.iter()).enumerate() {
                        or[j] = ca[j] * gi + cb[j] + cc[j] * xi;
                    }
                }
            }
        }
        (gx, dgamma, dbeta)
    }

    /// Backward when running statistics were used (inference-mode graphs).
    pub fn backward_eval(
        &self,
        x: ArrayView2<F>,
        g: ArrayView2<F>,
    ) -> (Array2<F>, Array1<F>, Array1<F>) {
        let c = x.ncols();
        let (mean, var) = self.eval_stats();
        let inv: Array1<F> = var.mapv(|v| (v + self.eps).sqrt().recip());
        let mut dbeta = Array1::<F>::zeros(c);
        let mut dgamma = Array1::<F>::zeros(c);
        let mut gx = Array2::<F>::zeros(x.raw_dim());
        for ((mut or, xr), gr) in gx.rows_mut().into_iter().zip(x.rows()).zip(g.rows()) {
            for (j, (oi, (&xi, &gi))) in or.iter_mut().zip(xr.iter().zip(gr.iter())).enumerate() {
                let xh = (xi - mean[j]) * inv[j];
                dbeta[j] += gi;
                dgamma[j] += gi * xh;
                *oi = self.gamma[j] * inv[j] * gi;
            }
        }
        (gx, dgamma, dbeta)
    }
}

/// Elementwise activation. The derivative of each is recoverable from the
/// output alone, so that is all the cache keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Elu,
    Sigmoid,
    Tanh,
}

impl Act {
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Act::Elu => {
                if x > F::zero() {
                    x
                } else {
                    x.exp() - F::one()
                }
            }
            Act::Sigmoid => (F::one() + (-x).exp()).recip(),
            Act::Tanh => x.tanh(),
        }
    }

    pub fn deriv_from_output<F: Scalar>(self, y: F) -> F {
        match self {
            Act::Elu => {
                if y > F::zero() {
                    F::one()
                } else {
                    y + F::one()
                }
            }
            Act::Sigmoid => y * (F::one() - y),
            Act::Tanh => F::one() - y * y,
        }
    }
}

/// Inverted dropout: surviving units are scaled by `1/(1-p)` during
/// training; inference is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    /// Draws a multiplier per element: 0 with probability p, else 1/(1-p).
    pub fn sample_mask<F: Scalar>(&self, len: usize, rng: &mut Rng) -> Vec<F> {
        let keep_scale = F::from_f64(1.0 / (1.0 - self.p));
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < self.p {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn dense_forward_matches_hand_computation() {
        let layer = Dense {
            w: arr2(&[[1.0, 2.0], [3.0, 4.0]]),
            b: ndarray::arr1(&[0.5, -0.5]),
        };
        let x = arr2(&[[1.0, 1.0]]);
        let y = layer.forward(&x);
        assert_eq!(y, arr2(&[[4.5, 5.5]]));
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let bn = BatchNorm::<f64>::new(1);
        let x = arr2(&[[1.0], [3.0]]);
        let (mean, var) = BatchNorm::batch_stats(x.view());
        assert_eq!(mean[0], 2.0);
        assert_eq!(var[0], 1.0);
        let y = bn.forward_with(x.view(), &mean, &var);
        assert!((y[[0, 0]] + 1.0).abs() < 1e-2);
        assert!((y[[1, 0]] - 1.0).abs() < 1e-2);
        assert!((y[[0, 0]] + y[[1, 0]]).abs() < 1e-12);
    }

    #[test]
    fn elu_is_continuous_at_zero() {
        assert_eq!(Act::Elu.apply(0.0f64), 0.0);
        assert_eq!(Act::Elu.deriv_from_output(0.0f64), 1.0);
        assert!((Act::Elu.apply(-1e-9f64) + 1e-9).abs() < 1e-15);
    }

    #[test]
    fn dropout_mask_is_zero_or_scale() {
        use rand::SeedableRng;
        let d = Dropout { p: 0.3 };
        let mut rng = crate::Rng::seed_from_u64(9);
        let mask: Vec<f64> = d.sample_mask(10_000, &mut rng);
        let scale = 1.0 / 0.7;
        assert!(mask.iter().all(|&m| m == 0.0 || (m - scale).abs() < 1e-12));
        let zero_frac = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 10_000.0;
        assert!((zero_frac - 0.3).abs() < 0.02, "zero fraction {zero_frac}");
    }
}
