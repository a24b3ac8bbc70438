//! The four training losses and the composite objective.
//!
//! Sign conventions: every term is returned as a quantity to *minimize*.
//! The mutual-information bound enters as the negative log-likelihood of the
//! structured code under the encoder's auxiliary posterior (its entropy
//! offset is constant and dropped), and the generator/encoder adversarial
//! terms use the non-saturating form, which shares the Nash point with the
//! minimax objective.

use crate::error::{Error, Result};
use crate::latent::CodeBatch;
use crate::models::{softmax_grad_logits, EncoderOutput, EncoderOutputGrads, LOGSTD_MAX, LOGSTD_MIN};
use crate::nn::Scalar;
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

/// Probability floor applied inside every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Loss weights. `info` and `adv` are ramp targets; the schedule scales
/// them during the opening iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sup: f64,
    pub rec: f64,
    pub info: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sup: 10.0,
            rec: 1.0,
            info: 1.0,
            adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.sup < 0.0 || self.rec < 0.0 || self.info < 0.0 || self.adv < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Per-iteration loss readings; the rows of the training CSV log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub rec: f64,
    pub info_cat: f64,
    pub info_cont: f64,
    pub sup: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub adv_e: f64,
    pub total_ge: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,rec,info_cat,info_cont,sup,adv_d,adv_g,adv_e";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.iter,
            self.rec,
            self.info_cat,
            self.info_cont,
            self.sup,
            self.adv_d,
            self.adv_g,
            self.adv_e
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.rec,
            self.info_cat,
            self.info_cont,
            self.sup,
            self.adv_d,
            self.adv_g,
            self.adv_e,
            self.total_ge,
            self.total_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn ln_floored<F: Scalar>(p: F) -> F {
    p.max(F::from_f64(PROB_EPS)).ln()
}

/// Mean over the batch of the per-sample pixel-sum of squared differences.
pub fn reconstruction_loss<F: Scalar>(x: &Array4<F>, x_hat: &Array4<F>) -> Result<F> {
    if x.dim() != x_hat.dim() {
        return Err(Error::invalid(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let n = F::from_f64(x.dim().0 as f64);
    let mut acc = F::zero();
    for (&a, &b) in x.iter().zip(x_hat.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / n)
}

/// Reconstruction loss and its gradient with respect to `x_hat`.
pub fn reconstruction_grad<F: Scalar>(
    x: &Array4<F>,
    x_hat: &Array4<F>,
) -> Result<(F, Array4<F>)> {
    let loss = reconstruction_loss(x, x_hat)?;
    let n = F::from_f64(x.dim().0 as f64);
    let two = F::from_f64(2.0);
    let mut g = Array4::zeros(x.raw_dim());
    for ((gv, &a), &b) in g.iter_mut().zip(x.iter()).zip(x_hat.iter()) {
        *gv = two * (b - a) / n;
    }
    Ok((loss, g))
}

fn check_logstd<F: Scalar>(logstd: &Array2<F>) -> Result<()> {
    let lo = F::from_f64(LOGSTD_MIN);
    let hi = F::from_f64(LOGSTD_MAX);
    if logstd.iter().any(|&s| !s.is_finite() || s < lo || s > hi) {
        return Err(Error::numeric(format!(
            "continuous log-std outside clamp range [{LOGSTD_MIN}, {LOGSTD_MAX}]"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of the structured code under the encoder's
/// posterior: categorical cross-entropy per block plus factored-Gaussian
/// NLL for the continuous part. Returns (categorical, continuous) terms,
/// each averaged over the batch.
pub fn info_loss<F: Scalar>(target: &CodeBatch<F>, enc: &EncoderOutput<F>) -> Result<(F, F)> {
    let ((cat, cont), _) = info_parts(target, enc, false)?;
    Ok((cat, cont))
}

/// Info loss plus its gradients with respect to the encoder outputs.
pub fn info_grads<F: Scalar>(
    target: &CodeBatch<F>,
    enc: &EncoderOutput<F>,
) -> Result<((F, F), EncoderOutputGrads<F>)> {
    let (losses, grads) = info_parts(target, enc, true)?;
    Ok((losses, grads.expect("requested gradients")))
}

fn info_parts<F: Scalar>(
    target: &CodeBatch<F>,
    enc: &EncoderOutput<F>,
    want_grads: bool,
) -> Result<((F, F), Option<EncoderOutputGrads<F>>)> {
    let n = target.len();
    if enc.batch_len() != n {
        return Err(Error::invalid("info loss batch sizes differ"));
    }
    if target.cats.len() != enc.cat_logits.len() {
        return Err(Error::invalid("info loss categorical block counts differ"));
    }
    check_logstd(&enc.cont_logstd)?;
    let nf = F::from_f64(n as f64);
    let eps = F::from_f64(PROB_EPS);

    let mut cat_total = F::zero();
    let mut cat_grads: Vec<Option<Array2<F>>> = Vec::with_capacity(enc.cat_logits.len());
    for (block, logits) in target.cats.iter().zip(&enc.cat_logits) {
        if block.dim() != logits.dim() {
            return Err(Error::invalid("info loss categorical block shapes differ"));
        }
        let probs = crate::models::softmax_rows(logits);
        for (&t, &p) in block.iter().zip(probs.iter()) {
            cat_total -= t * ln_floored(p);
        }
        if want_grads {
            let mut gp = Array2::<F>::zeros(probs.raw_dim());
            for ((gv, &t), &p) in gp.iter_mut().zip(block.iter()).zip(probs.iter()) {
                if p > eps {
                    *gv = -t / p / nf;
                }
            }
            cat_grads.push(Some(softmax_grad_logits(&probs, &gp)));
        } else {
            cat_grads.push(None);
        }
    }
    let cat_loss = cat_total / nf;

    if target.cont.dim() != enc.cont_mean.dim() {
        return Err(Error::invalid("info loss continuous widths differ"));
    }
    let half = F::from_f64(0.5);
    let ln_2pi = F::from_f64((2.0 * std::f64::consts::PI).ln());
    let mut cont_total = F::zero();
    let mut g_mean = want_grads.then(|| Array2::<F>::zeros(enc.cont_mean.raw_dim()));
    let mut g_logstd = want_grads.then(|| Array2::<F>::zeros(enc.cont_logstd.raw_dim()));
    for idx in 0..n {
        for j in 0..target.cont.ncols() {
            let t = target.cont[[idx, j]];
            let mu = enc.cont_mean[[idx, j]];
            let s = enc.cont_logstd[[idx, j]];
            let inv = (-s).exp();
            let z = (t - mu) * inv;
            cont_total += half * ln_2pi + s + half * z * z;
            if let (Some(gm), Some(gs)) = (&mut g_mean, &mut g_logstd) {
                gm[[idx, j]] = -(t - mu) * inv * inv / nf;
                gs[[idx, j]] = (F::one() - z * z) / nf;
            }
        }
    }
    let cont_loss = cont_total / nf;

    let grads = want_grads.then(|| EncoderOutputGrads {
        u_hat: None,
        cat_logits: cat_grads,
        cont_mean: g_mean,
        cont_logstd: g_logstd,
    });
    Ok(((cat_loss, cont_loss), grads))
}

/// Cross-entropy of encoder class posteriors against provided labels,
/// summed over labeled (sample, block) entries and averaged over the number
/// of labeled entries. Zero when the mask is empty.
pub fn supervised_loss<F: Scalar>(
    enc: &EncoderOutput<F>,
    labels: &Array2<i64>,
    mask: &Array2<bool>,
) -> Result<F> {
    let (loss, _) = supervised_parts(enc, labels, mask, false)?;
    Ok(loss)
}

/// Supervised loss plus its gradients with respect to the encoder outputs.
pub fn supervised_grads<F: Scalar>(
    enc: &EncoderOutput<F>,
    labels: &Array2<i64>,
    mask: &Array2<bool>,
) -> Result<(F, EncoderOutputGrads<F>)> {
    let (loss, grads) = supervised_parts(enc, labels, mask, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

fn supervised_parts<F: Scalar>(
    enc: &EncoderOutput<F>,
    labels: &Array2<i64>,
    mask: &Array2<bool>,
    want_grads: bool,
) -> Result<(F, Option<EncoderOutputGrads<F>>)> {
    let n = enc.batch_len();
    let blocks = enc.cat_logits.len();
    if labels.dim() != (n, blocks) || mask.dim() != (n, blocks) {
        return Err(Error::invalid(format!(
            "supervised loss expects labels/mask of shape ({n}, {blocks})"
        )));
    }
    let labeled = mask.iter().filter(|&&m| m).count();
    if labeled == 0 {
        let grads = want_grads.then(|| EncoderOutputGrads {
            u_hat: None,
            cat_logits: vec![None; blocks],
            cont_mean: None,
            cont_logstd: None,
        });
        return Ok((F::zero(), grads));
    }
    let count = F::from_f64(labeled as f64);
    let eps = F::from_f64(PROB_EPS);
    let mut total = F::zero();
    let mut cat_grads: Vec<Option<Array2<F>>> = Vec::with_capacity(blocks);
    for (b, logits) in enc.cat_logits.iter().enumerate() {
        let k = logits.ncols();
        let probs = crate::models::softmax_rows(logits);
        let mut gp = want_grads.then(|| Array2::<F>::zeros(probs.raw_dim()));
        let mut block_used = false;
        for i in 0..n {
            if !mask[[i, b]] {
                continue;
            }
            let y = labels[[i, b]];
            if y < 0 || y as usize >= k {
                return Err(Error::invalid(format!(
                    "label {y} out of range for block {b} (cardinality {k})"
                )));
            }
            let p = probs[[i, y as usize]];
            total -= ln_floored(p);
            block_used = true;
            if let Some(g) = &mut gp {
                if p > eps {
                    g[[i, y as usize]] = -F::one() / p / count;
                }
            }
        }
        match gp {
            Some(g) if block_used => cat_grads.push(Some(softmax_grad_logits(&probs, &g))),
            _ => cat_grads.push(None),
        }
    }
    let loss = total / count;
    let grads = want_grads.then(|| EncoderOutputGrads {
        u_hat: None,
        cat_logits: cat_grads,
        cont_mean: None,
        cont_logstd: None,
    });
    Ok((loss, grads))
}

fn clamp_prob<F: Scalar>(p: F) -> F {
    let eps = F::from_f64(PROB_EPS);
    p.max(eps).min(F::one() - eps)
}

/// Adversarial losses from the discriminator outputs on encoder pairs
/// (`d_real`, over (X, E(X))) and generator pairs (`d_fake`, over (G(Z), Z)).
/// Returns (L_D, L_G, L_E): the discriminator's binary cross-entropy and the
/// two non-saturating player losses.
pub fn adversarial_losses<F: Scalar>(d_real: &Array1<F>, d_fake: &Array1<F>) -> (F, F, F) {
    let nr = F::from_f64(d_real.len() as f64);
    let nf = F::from_f64(d_fake.len() as f64);
    let mut l_d = F::zero();
    let mut l_e = F::zero();
    for &p in d_real {
        let p = clamp_prob(p);
        l_d -= p.ln() / nr;
        l_e -= (F::one() - p).ln() / nr;
    }
    let mut l_g = F::zero();
    for &p in d_fake {
        let p = clamp_prob(p);
        l_d -= (F::one() - p).ln() / nf;
        l_g -= p.ln() / nf;
    }
    (l_d, l_g, l_e)
}

/// d L_D / d d_real and d L_D / d d_fake.
pub fn adv_d_grads<F: Scalar>(d_real: &Array1<F>, d_fake: &Array1<F>) -> (Array1<F>, Array1<F>) {
    let eps = F::from_f64(PROB_EPS);
    let one = F::one();
    let nr = F::from_f64(d_real.len() as f64);
    let nf = F::from_f64(d_fake.len() as f64);
    let g_real = d_real.mapv(|p| {
        if p > eps && p < one - eps {
            -one / (p * nr)
        } else {
            F::zero()
        }
    });
    let g_fake = d_fake.mapv(|p| {
        if p > eps && p < one - eps {
            one / ((one - p) * nf)
        } else {
            F::zero()
        }
    });
    (g_real, g_fake)
}

/// d L_G / d d_fake for the non-saturating generator loss.
pub fn adv_g_grad<F: Scalar>(d_fake: &Array1<F>) -> Array1<F> {
    let eps = F::from_f64(PROB_EPS);
    let one = F::one();
    let n = F::from_f64(d_fake.len() as f64);
    d_fake.mapv(|p| {
        if p > eps && p < one - eps {
            -one / (p * n)
        } else {
            F::zero()
        }
    })
}

/// d L_E / d d_real for the non-saturating encoder loss.
pub fn adv_e_grad<F: Scalar>(d_real: &Array1<F>) -> Array1<F> {
    let eps = F::from_f64(PROB_EPS);
    let one = F::one();
    let n = F::from_f64(d_real.len() as f64);
    d_real.mapv(|p| {
        if p > eps && p < one - eps {
            one / ((one - p) * n)
        } else {
            F::zero()
        }
    })
}

/// Combines component losses under effective weights (ramps already
/// applied): the generator/encoder total and the discriminator total.
pub fn composite(
    rec: f64,
    info_cat: f64,
    info_cont: f64,
    sup: f64,
    adv_d: f64,
    adv_g: f64,
    adv_e: f64,
    w: &LossWeights,
) -> (f64, f64) {
    let total_ge = w.sup * sup + w.rec * rec + w.info * (info_cat + info_cont) + w.adv * (adv_g + adv_e);
    let total_d = w.adv * adv_d;
    (total_ge, total_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentSpec;
    use ndarray::{arr1, arr2, Array4};
    use rand::SeedableRng;

    const TOL: f64 = 1e-9;

    fn enc_out(
        cat_logits: Vec<Array2<f64>>,
        cont_mean: Array2<f64>,
        cont_logstd: Array2<f64>,
    ) -> EncoderOutput<f64> {
        let n = cont_mean.nrows();
        EncoderOutput {
            u_hat: Array2::zeros((n, 0)),
            cat_logits,
            cont_mean,
            cont_logstd,
        }
    }

    #[test]
    fn reconstruction_hand_cases() {
        // Identity.
        let x = Array4::<f64>::from_shape_vec((1, 2, 2, 1), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        // Single pixel off by 0.5 in a batch of one.
        let x_hat = Array4::from_shape_vec((1, 2, 2, 1), vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!((reconstruction_loss(&x, &x_hat).unwrap() - 0.25).abs() < TOL);
        // Batch of two with per-sample losses 0.25 and 0.75.
        let x2 = Array4::from_shape_vec(
            (2, 2, 2, 1),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let mut v = vec![0.5, 0.0, 0.0, 0.0];
        let d = (0.75f64 / 3.0).sqrt();
        v.extend_from_slice(&[1.0, d, d, d]);
        let x2_hat = Array4::from_shape_vec((2, 2, 2, 1), v).unwrap();
        assert!((reconstruction_loss(&x2, &x2_hat).unwrap() - 0.5).abs() < TOL);
        // Shape mismatch is an argument error.
        let bad = Array4::<f64>::zeros((1, 2, 2, 2));
        assert!(reconstruction_loss(&x, &bad).is_err());
    }

    #[test]
    fn info_uniform_posterior_is_ln_10() {
        let spec = LatentSpec::new(0, vec![10], 0).unwrap();
        let mut rng = crate::Rng::seed_from_u64(1);
        let z = CodeBatch::<f64>::sample(&spec, 4, &mut rng);
        let enc = enc_out(
            vec![Array2::zeros((4, 10))],
            Array2::zeros((4, 0)),
            Array2::zeros((4, 0)),
        );
        let (cat, cont) = info_loss(&z, &enc).unwrap();
        assert!((cat - 10.0f64.ln()).abs() < 1e-9, "{cat}");
        assert_eq!(cont, 0.0);
    }

    #[test]
    fn info_gaussian_nll_at_mean_with_zero_logstd() {
        let z = CodeBatch::<f64> {
            u: Array2::zeros((2, 0)),
            cats: vec![arr2(&[[1.0, 0.0], [0.0, 1.0]])],
            cont: arr2(&[[0.3], [-0.6]]),
        };
        // Posterior mean equals the target, log-std 0, and near-one-hot
        // class logits matching the targets.
        let enc = enc_out(
            vec![arr2(&[[40.0, 0.0], [0.0, 40.0]])],
            z.cont.clone(),
            Array2::zeros((2, 1)),
        );
        let (cat, cont) = info_loss(&z, &enc).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((cont - half_ln_2pi).abs() < 1e-9, "{cont}");
        assert!(cat.abs() < 1e-6, "{cat}");
    }

    #[test]
    fn info_rejects_out_of_clamp_logstd() {
        let spec = LatentSpec::new(0, vec![2], 1).unwrap();
        let mut rng = crate::Rng::seed_from_u64(2);
        let z = CodeBatch::<f64>::sample(&spec, 1, &mut rng);
        let enc = enc_out(
            vec![Array2::zeros((1, 2))],
            Array2::zeros((1, 1)),
            arr2(&[[3.0]]),
        );
        assert!(matches!(info_loss(&z, &enc), Err(Error::Numeric(_))));
    }

    #[test]
    fn supervised_hand_cases() {
        // Uniform posterior over two classes: ln 2.
        let enc = enc_out(
            vec![Array2::zeros((1, 2))],
            Array2::zeros((1, 0)),
            Array2::zeros((1, 0)),
        );
        let labels = arr2(&[[1i64]]);
        let mask = arr2(&[[true]]);
        let loss = supervised_loss(&enc, &labels, &mask).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        // Empty mask: exactly zero.
        let none = arr2(&[[false]]);
        assert_eq!(supervised_loss(&enc, &labels, &none).unwrap(), 0.0);
        // Perfect prediction: at most the probability floor.
        let sharp = enc_out(
            vec![arr2(&[[-40.0, 40.0]])],
            Array2::zeros((1, 0)),
            Array2::zeros((1, 0)),
        );
        assert!(supervised_loss(&sharp, &labels, &mask).unwrap() <= 1e-6);
        // Out-of-range label.
        let bad = arr2(&[[2i64]]);
        assert!(supervised_loss(&enc, &bad, &mask).is_err());
    }

    #[test]
    fn supervised_equals_info_categorical_term_on_matching_targets() {
        let spec = LatentSpec::new(0, vec![5], 0).unwrap();
        let mut rng = crate::Rng::seed_from_u64(3);
        let z = CodeBatch::<f64>::sample(&spec, 16, &mut rng);
        use rand::Rng as _;
        let logits =
            Array2::from_shape_fn((16, 5), |_| rng.random::<f64>() * 4.0 - 2.0);
        let enc = enc_out(
            vec![logits],
            Array2::zeros((16, 0)),
            Array2::zeros((16, 0)),
        );
        let labels = Array2::from_shape_fn((16, 1), |(i, _)| {
            z.cats[0]
                .row(i)
                .iter()
                .position(|&p| p == 1.0)
                .unwrap() as i64
        });
        let mask = Array2::from_elem((16, 1), true);
        let sup = supervised_loss(&enc, &labels, &mask).unwrap();
        let (cat, _) = info_loss(&z, &enc).unwrap();
        assert!((sup - cat).abs() < 1e-10, "{sup} vs {cat}");
    }

    #[test]
    fn adversarial_symmetric_point() {
        let half = arr1(&[0.5f64, 0.5, 0.5]);
        let (l_d, l_g, l_e) = adversarial_losses(&half, &half);
        assert!((l_d - 2.0 * 2.0f64.ln()).abs() < 1e-12);
        assert!((l_g - 2.0f64.ln()).abs() < 1e-12);
        assert!((l_e - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_limits() {
        let ones = arr1(&[1.0f64]);
        let (_, l_g, _) = adversarial_losses(&arr1(&[0.5f64]), &ones);
        assert!(l_g < 1e-6, "generator-wins limit, got {l_g}");
        // Extreme inputs stay finite thanks to clamping.
        let (l_d, l_g, l_e) = adversarial_losses(&arr1(&[0.0f64]), &arr1(&[1.0f64]));
        assert!(l_d.is_finite() && l_g.is_finite() && l_e.is_finite());
    }

    #[test]
    fn composite_hand_case() {
        let w = LossWeights::default();
        let (ge, d) = composite(0.25, 1.0, 0.0, 0.5, 0.7, 1.2, 0.8, &w);
        assert!((ge - 8.25).abs() < 1e-12);
        assert!((d - 0.7).abs() < 1e-12);
        let (z_ge, z_d) = composite(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w);
        assert_eq!((z_ge, z_d), (0.0, 0.0));
        // Ramp start: info and adversarial terms vanish.
        let start = LossWeights {
            info: 0.0,
            adv: 0.0,
            ..w
        };
        let (ge0, d0) = composite(0.25, 9.0, 9.0, 0.5, 9.0, 9.0, 9.0, &start);
        assert!((ge0 - (10.0 * 0.5 + 0.25)).abs() < 1e-12);
        assert_eq!(d0, 0.0);
    }

    #[test]
    fn composite_is_linear_in_each_weight() {
        let w = LossWeights::default();
        let doubled = LossWeights { rec: 2.0, ..w };
        let base = composite(0.3, 0.1, 0.2, 0.4, 0.5, 0.6, 0.7, &w).0;
        let more = composite(0.3, 0.1, 0.2, 0.4, 0.5, 0.6, 0.7, &doubled).0;
        assert!((more - base - 0.3).abs() < 1e-12);
    }

    #[test]
    fn csv_row_round_trips_f32_readings_exactly() {
        // Training accumulates losses in f32; nine significant digits pin
        // each f32 value uniquely, so rows parse back bit-identical.
        let r = LossReport {
            iter: 7,
            rec: 1.234_567_9e-3_f32 as f64,
            info_cat: 2.0f32.ln() as f64,
            info_cont: 0.918_938_5_f32 as f64,
            sup: 0.0,
            adv_d: 1.386_294_3_f32 as f64,
            adv_g: 0.5,
            adv_e: 0.25,
            total_ge: 0.0,
            total_d: 0.0,
        };
        let row = r.csv_row();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[0], "7");
        let back: f64 = fields[2].parse().unwrap();
        assert_eq!(back as f32, 2.0f32.ln());
    }
}
