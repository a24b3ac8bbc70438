//! The joint optimization loop: alternating discriminator and
//! generator/encoder updates over mixed labeled/unlabeled batches, with
//! checkpointing and deterministic resume.
//!
//! Each iteration runs two phases on one data batch and one fresh code
//! batch. Phase one scores ((X, E(X)) vs (G(Z), Z)) and steps the
//! discriminator on the weighted binary cross-entropy. Phase two rescores
//! the pairs under the updated discriminator and takes a single joint Adam
//! step of the generator and encoder on the composite objective
//! (supervision + reconstruction + mutual information + the two
//! non-saturating adversarial terms). Encoder and generator forwards from
//! phase one are reused in phase two; their parameters have not changed in
//! between, so the values are identical to recomputation.

use crate::checkpoint::{self, ArrayEntry, Manifest, RngState};
use crate::config::{DatasetKind, RunConfig};
use crate::data::{self, idx, shapes, Dataset, LabeledBatch, Split};
use crate::error::{Error, Result};
use crate::latent::CodeBatch;
use crate::losses::{self, LossReport, LossWeights};
use crate::models::{DiscGrads, DiscStats, EncFwd, EncoderOutput, EncoderOutputGrads, GenFwd, Model};
use crate::netspec::ModelConfig;
use crate::nn::{BatchStats, NetGrads, Phase, Scalar};
use crate::schedule::{adam_step_net, lambda_at, labeled_prob_at, AdamState, OptimizerSpec, RampedWeight, SchedulePreset};
use crate::Rng;
use ndarray::{s, Array2, Array4};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Salt separating the data-setup RNG stream from the training stream.
const SETUP_SALT: u64 = 0x5e7u64 << 32;

/// Concatenates the deterministic code the encoder produced for a batch:
/// `u_hat`, softmax class probabilities per block, continuous means.
/// Returns the flat codes and the per-block probabilities (needed to
/// backpropagate through the softmax).
pub fn assemble_code<F: Scalar>(enc: &EncoderOutput<F>) -> (Array2<F>, Vec<Array2<F>>) {
    let probs = enc.cat_probs();
    let n = enc.u_hat.nrows();
    let total = enc.u_hat.ncols()
        + probs.iter().map(|p| p.ncols()).sum::<usize>()
        + enc.cont_mean.ncols();
    let mut flat = Array2::<F>::zeros((n, total));
    let mut pos = 0;
    let mut put = |src: &Array2<F>, pos: &mut usize| {
        flat.slice_mut(s![.., *pos..*pos + src.ncols()]).assign(src);
        *pos += src.ncols();
    };
    put(&enc.u_hat, &mut pos);
    for p in &probs {
        put(p, &mut pos);
    }
    put(&enc.cont_mean, &mut pos);
    (flat, probs)
}

/// Splits a cotangent of the assembled code back into encoder-output
/// cotangents, mapping the categorical parts through the softmax.
fn split_code_grads<F: Scalar>(
    g_code: &Array2<F>,
    enc: &EncoderOutput<F>,
    probs: &[Array2<F>],
) -> EncoderOutputGrads<F> {
    let mut pos = 0;
    let u_w = enc.u_hat.ncols();
    let g_u = g_code.slice(s![.., pos..pos + u_w]).to_owned();
    pos += u_w;
    let mut cat_logits = Vec::with_capacity(probs.len());
    for p in probs {
        let gp = g_code.slice(s![.., pos..pos + p.ncols()]).to_owned();
        pos += p.ncols();
        cat_logits.push(Some(crate::models::softmax_grad_logits(p, &gp)));
    }
    let g_mean = g_code
        .slice(s![.., pos..pos + enc.cont_mean.ncols()])
        .to_owned();
    EncoderOutputGrads {
        u_hat: Some(g_u),
        cat_logits,
        cont_mean: Some(g_mean),
        cont_logstd: None,
    }
}

/// Output of the discriminator phase: its gradients and loss, plus the
/// encoder/generator forwards phase two reuses.
pub struct DiscPass<F: Scalar> {
    pub adv_d: F,
    pub grads: DiscGrads<F>,
    pub stats: DiscStats<F>,
    pub enc_real: EncFwd<F>,
    pub code_real: Array2<F>,
    pub cat_probs_real: Vec<Array2<F>>,
    pub gen_fake: GenFwd<F>,
}

/// Phase one: sample pairs from both paths and backpropagate the weighted
/// discriminator loss into the discriminator parameters only.
pub fn discriminator_pass<F: Scalar>(
    model: &Model<F>,
    images: &Array4<F>,
    z: &CodeBatch<F>,
    lambda_adv: f64,
    rng: &mut Rng,
) -> Result<DiscPass<F>> {
    let enc_real = model.enc.forward(images, Phase::Train, true)?;
    let (code_real, cat_probs_real) = assemble_code(&enc_real.out);
    let z_flat = z.flat();
    let gen_fake = model.gen.forward(&z_flat, Phase::Train, true)?;
    let d_real = model
        .disc
        .forward(images, &code_real, Phase::Train, Some(rng), true)?;
    let d_fake = model
        .disc
        .forward(&gen_fake.images, &z_flat, Phase::Train, Some(rng), true)?;
    let (adv_d, _, _) = losses::adversarial_losses(&d_real.probs, &d_fake.probs);
    let lam = F::from_f64(lambda_adv);
    let mut g_real = losses::adv_d_grads(&d_real.probs, &d_fake.probs);
    g_real.0.mapv_inplace(|v| v * lam);
    g_real.1.mapv_inplace(|v| v * lam);
    let mut grads = DiscGrads::zeros_of(&model.disc);
    model.disc.backward(
        d_real.cache.as_ref().expect("cached forward"),
        &g_real.0,
        Some(&mut grads),
    )?;
    model.disc.backward(
        d_fake.cache.as_ref().expect("cached forward"),
        &g_real.1,
        Some(&mut grads),
    )?;
    let mut stats = d_real.stats;
    stats.image.extend(d_fake.stats.image);
    stats.code.extend(d_fake.stats.code);
    stats.trunk.extend(d_fake.stats.trunk);
    Ok(DiscPass {
        adv_d,
        grads,
        stats,
        enc_real,
        code_real,
        cat_probs_real,
        gen_fake,
    })
}

/// Output of the generator/encoder phase.
pub struct GePass<F: Scalar> {
    pub rec: F,
    pub info_cat: F,
    pub info_cont: F,
    pub sup: F,
    pub adv_g: F,
    pub adv_e: F,
    pub g_gen: NetGrads<F>,
    pub g_enc: NetGrads<F>,
    pub gen_stats: Vec<BatchStats<F>>,
    pub enc_stats: Vec<BatchStats<F>>,
}

/// Phase two: rescore pairs under the current discriminator and accumulate
/// the composite gradients for the generator and encoder. `weights` are
/// the effective values for this iteration (ramps already applied).
pub fn generator_encoder_pass<F: Scalar>(
    model: &Model<F>,
    images: &Array4<F>,
    labels: &Array2<i64>,
    mask: &Array2<bool>,
    z: &CodeBatch<F>,
    d: &DiscPass<F>,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<GePass<F>> {
    let z_flat = z.flat();
    let x_rec = model.gen.forward(&d.code_real, Phase::Train, true)?;
    let enc_fake = model.enc.forward(&d.gen_fake.images, Phase::Train, true)?;
    let d_real = model
        .disc
        .forward(images, &d.code_real, Phase::Train, Some(rng), true)?;
    let d_fake = model
        .disc
        .forward(&d.gen_fake.images, &z_flat, Phase::Train, Some(rng), true)?;

    let (rec, mut g_xrec) = losses::reconstruction_grad(images, &x_rec.images)?;
    let (sup, mut g_sup) = losses::supervised_grads(&d.enc_real.out, labels, mask)?;
    let ((info_cat, info_cont), mut g_info) = losses::info_grads(z, &enc_fake.out)?;
    let (_, adv_g, adv_e) = losses::adversarial_losses(&d_real.probs, &d_fake.probs);
    let lam_adv = F::from_f64(weights.adv);
    let mut g_dfake = losses::adv_g_grad(&d_fake.probs);
    let mut g_dreal = losses::adv_e_grad(&d_real.probs);
    g_dfake.mapv_inplace(|v| v * lam_adv);
    g_dreal.mapv_inplace(|v| v * lam_adv);
    let lam_rec = F::from_f64(weights.rec);
    g_xrec.mapv_inplace(|v| v * lam_rec);
    g_sup.scale(F::from_f64(weights.sup));
    g_info.scale(F::from_f64(weights.info));

    let mut g_gen = NetGrads::zeros_of(&model.gen.net);
    let mut g_enc = NetGrads::zeros_of(&model.enc.net);

    // Reconstruction: into the generator and the assembled code.
    let mut g_code = model.gen.backward(
        x_rec.cache.as_ref().expect("cached forward"),
        g_xrec,
        Some(&mut g_gen),
    )?;
    // Encoder adversarial term: its (X, E(X)) pair should look generated.
    let (_, g_code_adv) = model.disc.backward(
        d_real.cache.as_ref().expect("cached forward"),
        &g_dreal,
        None,
    )?;
    g_code += &g_code_adv;
    // Code cotangent back through the head, merged with supervision.
    let mut enc_real_grads = split_code_grads(&g_code, &d.enc_real.out, &d.cat_probs_real);
    enc_real_grads.merge(&g_sup);
    model.enc.backward(
        d.enc_real.cache.as_ref().expect("cached forward"),
        &d.enc_real.out,
        &enc_real_grads,
        Some(&mut g_enc),
    )?;
    // Mutual information: into the encoder and through it into G(Z).
    let g_xfake_info = model.enc.backward(
        enc_fake.cache.as_ref().expect("cached forward"),
        &enc_fake.out,
        &g_info,
        Some(&mut g_enc),
    )?;
    // Generator adversarial term: its (G(Z), Z) pair should look encoded.
    let (g_xfake_adv, _) = model.disc.backward(
        d_fake.cache.as_ref().expect("cached forward"),
        &g_dfake,
        None,
    )?;
    let g_xfake = g_xfake_info + g_xfake_adv;
    model.gen.backward(
        d.gen_fake.cache.as_ref().expect("cached forward"),
        g_xfake,
        Some(&mut g_gen),
    )?;

    Ok(GePass {
        rec,
        info_cat,
        info_cont,
        sup,
        adv_g,
        adv_e,
        g_gen,
        g_enc,
        gen_stats: x_rec.stats,
        enc_stats: enc_fake.stats,
    })
}

/// Runs both phases without touching any state and reports the losses;
/// the pure function of (parameters, inputs, rng) that the numerical
/// gradient checks difference.
pub fn step_losses<F: Scalar>(
    model: &Model<F>,
    images: &Array4<F>,
    labels: &Array2<i64>,
    mask: &Array2<bool>,
    z: &CodeBatch<F>,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<LossReport> {
    let d = discriminator_pass(model, images, z, weights.adv, rng)?;
    let ge = generator_encoder_pass(model, images, labels, mask, z, &d, weights, rng)?;
    let (total_ge, total_d) = losses::composite(
        ge.rec.to_f64(),
        ge.info_cat.to_f64(),
        ge.info_cont.to_f64(),
        ge.sup.to_f64(),
        d.adv_d.to_f64(),
        ge.adv_g.to_f64(),
        ge.adv_e.to_f64(),
        &LossWeights {
            sup: weights.sup,
            rec: weights.rec,
            info: 1.0,
            adv: 1.0,
        },
    );
    Ok(LossReport {
        iter: 0,
        rec: ge.rec.to_f64(),
        info_cat: ge.info_cat.to_f64(),
        info_cont: ge.info_cont.to_f64(),
        sup: ge.sup.to_f64(),
        adv_d: d.adv_d.to_f64(),
        adv_g: ge.adv_g.to_f64(),
        adv_e: ge.adv_e.to_f64(),
        total_ge,
        total_d,
    })
}

/// Everything a resumable run carries between iterations.
pub struct TrainState {
    pub model: Model<f32>,
    pub iter: u64,
    pub adam_gen: AdamState<f32>,
    pub adam_enc: AdamState<f32>,
    pub adam_disc_image: AdamState<f32>,
    pub adam_disc_code: AdamState<f32>,
    pub adam_disc_trunk: AdamState<f32>,
    pub rng: Rng,
    pub weights: LossWeights,
    pub opt: OptimizerSpec,
    pub preset: SchedulePreset,
    pub seed: u64,
    pub fingerprint: String,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<TrainState> {
        cfg.validate()?;
        let model_cfg = crate::netspec::build_family(cfg.family, &cfg.latent, cfg.image)?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let model: Model<f32> = Model::init(model_cfg, &mut rng)?;
        Ok(TrainState {
            adam_gen: AdamState::for_net(&model.gen.net),
            adam_enc: AdamState::for_net(&model.enc.net),
            adam_disc_image: AdamState::for_net(&model.disc.image),
            adam_disc_code: AdamState::for_net(&model.disc.code),
            adam_disc_trunk: AdamState::for_net(&model.disc.trunk),
            model,
            iter: 0,
            rng,
            weights: cfg.weights,
            opt: cfg.opt,
            preset: cfg.schedule_preset(),
            seed: cfg.seed,
            fingerprint: cfg.fingerprint(),
        })
    }

    /// One full iteration: discriminator step, then a joint
    /// generator/encoder step, both on the given batch and a fresh code
    /// sample. Schedules are evaluated at the current iteration counter.
    pub fn train_step(&mut self, batch: &LabeledBatch) -> Result<LossReport> {
        let n = batch.images.shape()[0];
        let lam_info = lambda_at(self.iter, RampedWeight::Info, &self.preset) * self.weights.info;
        let lam_adv = lambda_at(self.iter, RampedWeight::Adv, &self.preset) * self.weights.adv;
        let z = CodeBatch::<f32>::sample(&self.model.enc.spec, n, &mut self.rng);

        let d_pass = discriminator_pass(&self.model, &batch.images, &z, lam_adv, &mut self.rng)?;
        let o = &self.opt;
        adam_step_net(
            &mut self.model.disc.image,
            &d_pass.grads.image,
            &mut self.adam_disc_image,
            o.lr_d,
            o.beta1,
            o.beta2,
            o.eps,
        )?;
        adam_step_net(
            &mut self.model.disc.code,
            &d_pass.grads.code,
            &mut self.adam_disc_code,
            o.lr_d,
            o.beta1,
            o.beta2,
            o.eps,
        )?;
        adam_step_net(
            &mut self.model.disc.trunk,
            &d_pass.grads.trunk,
            &mut self.adam_disc_trunk,
            o.lr_d,
            o.beta1,
            o.beta2,
            o.eps,
        )?;
        self.model.disc.apply_batch_stats(&d_pass.stats);

        let eff = LossWeights {
            sup: self.weights.sup,
            rec: self.weights.rec,
            info: lam_info,
            adv: lam_adv,
        };
        let ge = generator_encoder_pass(
            &self.model,
            &batch.images,
            &batch.labels,
            &batch.mask,
            &z,
            &d_pass,
            &eff,
            &mut self.rng,
        )?;
        let (total_ge, total_d) = losses::composite(
            ge.rec.to_f64(),
            ge.info_cat.to_f64(),
            ge.info_cont.to_f64(),
            ge.sup.to_f64(),
            d_pass.adv_d.to_f64(),
            ge.adv_g.to_f64(),
            ge.adv_e.to_f64(),
            &LossWeights {
                sup: self.weights.sup,
                rec: self.weights.rec,
                info: lam_info,
                adv: lam_adv,
            },
        );
        let report = LossReport {
            iter: self.iter,
            rec: ge.rec.to_f64(),
            info_cat: ge.info_cat.to_f64(),
            info_cont: ge.info_cont.to_f64(),
            sup: ge.sup.to_f64(),
            adv_d: d_pass.adv_d.to_f64(),
            adv_g: ge.adv_g.to_f64(),
            adv_e: ge.adv_e.to_f64(),
            total_ge,
            total_d,
        };
        if !report.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at iteration {}",
                self.iter
            )));
        }
        let o = &self.opt;
        adam_step_net(
            &mut self.model.gen.net,
            &ge.g_gen,
            &mut self.adam_gen,
            o.lr_ge,
            o.beta1,
            o.beta2,
            o.eps,
        )?;
        adam_step_net(
            &mut self.model.enc.net,
            &ge.g_enc,
            &mut self.adam_enc,
            o.lr_ge,
            o.beta1,
            o.beta2,
            o.eps,
        )?;
        self.model.gen.net.apply_batch_stats(&d_pass.gen_fake.stats);
        self.model.gen.net.apply_batch_stats(&ge.gen_stats);
        self.model.enc.net.apply_batch_stats(&d_pass.enc_real.stats);
        self.model.enc.net.apply_batch_stats(&ge.enc_stats);
        self.iter += 1;
        Ok(report)
    }

    fn adam_groups(&self) -> [(&'static str, &AdamState<f32>); 5] {
        [
            ("generator", &self.adam_gen),
            ("encoder", &self.adam_enc),
            ("disc.image", &self.adam_disc_image),
            ("disc.code", &self.adam_disc_code),
            ("disc.trunk", &self.adam_disc_trunk),
        ]
    }

    fn state_arrays(&self) -> Vec<(String, Vec<f32>)> {
        let mut arrays: Vec<(String, Vec<f32>)> = Vec::new();
        self.model
            .for_each_state(&mut |name, s| arrays.push((name, s.to_vec())));
        for (prefix, adam) in self.adam_groups() {
            for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
                arrays.push((format!("adam.{prefix}.{i}.m"), m.clone()));
                arrays.push((format!("adam.{prefix}.{i}.v"), v.clone()));
            }
        }
        arrays
    }

    /// Writes a versioned checkpoint: manifest (format version,
    /// architecture echo, iteration, seed, RNG position) plus every
    /// parameter, running statistic, and optimizer moment array.
    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays = self.state_arrays();
        let manifest = TrainManifest {
            format_version: checkpoint::FORMAT_VERSION,
            kind: CHECKPOINT_KIND.to_string(),
            iteration: self.iter,
            seed: self.seed,
            rng: RngState::capture(&self.rng),
            model: self.model.config.clone(),
            architecture: self.model.config.describe(),
            weights: self.weights,
            opt: self.opt,
            ramp_iters: self.preset.ramp_iters,
            train_iters: self.preset.train_iters,
            adam_t_ge: self.adam_gen.t,
            adam_t_d: self.adam_disc_image.t,
            config_fingerprint: self.fingerprint.clone(),
            arrays: arrays
                .iter()
                .map(|(n, d)| ArrayEntry {
                    name: n.clone(),
                    len: d.len() as u64,
                })
                .collect(),
        };
        checkpoint::write_container(path, &manifest, &arrays)
    }

    /// Loads a checkpoint, verifying the container, the manifest's
    /// architecture echo, and the array inventory against the rebuilt
    /// model.
    pub fn load(path: &Path) -> Result<TrainState> {
        let (manifest, arrays) = checkpoint::read_container::<TrainManifest>(path)?;
        if manifest.kind != CHECKPOINT_KIND {
            return Err(Error::invalid(format!(
                "checkpoint kind '{}' is not a training state",
                manifest.kind
            )));
        }
        manifest.model.validate()?;
        if manifest.architecture != manifest.model.describe() {
            return Err(Error::config(
                "checkpoint architecture echo does not match its model configuration",
            ));
        }
        // Build a model of the right shape, then overwrite every array.
        let mut scratch_rng = Rng::seed_from_u64(0);
        let model: Model<f32> = Model::init(manifest.model.clone(), &mut scratch_rng)?;
        let mut state = TrainState {
            adam_gen: AdamState::for_net(&model.gen.net),
            adam_enc: AdamState::for_net(&model.enc.net),
            adam_disc_image: AdamState::for_net(&model.disc.image),
            adam_disc_code: AdamState::for_net(&model.disc.code),
            adam_disc_trunk: AdamState::for_net(&model.disc.trunk),
            model,
            iter: manifest.iteration,
            rng: manifest.rng.restore(),
            weights: manifest.weights,
            opt: manifest.opt,
            preset: SchedulePreset {
                ramp_iters: manifest.ramp_iters,
                train_iters: manifest.train_iters,
            },
            seed: manifest.seed,
            fingerprint: manifest.config_fingerprint.clone(),
        };
        let expected: Vec<(String, usize)> = state
            .state_arrays()
            .into_iter()
            .map(|(n, d)| (n, d.len()))
            .collect();
        if expected.len() != arrays.len()
            || expected
                .iter()
                .zip(&arrays)
                .any(|((en, el), (an, ad))| en != an || *el != ad.len())
        {
            return Err(Error::config(
                "checkpoint arrays do not match the declared architecture",
            ));
        }
        let mut it = arrays.into_iter();
        state.model.for_each_state_mut(&mut |_, s| {
            let (_, data) = it.next().expect("inventory verified");
            s.copy_from_slice(&data);
        });
        for adam in [
            &mut state.adam_gen,
            &mut state.adam_enc,
            &mut state.adam_disc_image,
            &mut state.adam_disc_code,
            &mut state.adam_disc_trunk,
        ] {
            for i in 0..adam.m.len() {
                let (_, m) = it.next().expect("inventory verified");
                adam.m[i].copy_from_slice(&m);
                let (_, v) = it.next().expect("inventory verified");
                adam.v[i].copy_from_slice(&v);
            }
        }
        state.adam_gen.t = manifest.adam_t_ge;
        state.adam_enc.t = manifest.adam_t_ge;
        state.adam_disc_image.t = manifest.adam_t_d;
        state.adam_disc_code.t = manifest.adam_t_d;
        state.adam_disc_trunk.t = manifest.adam_t_d;
        Ok(state)
    }
}

const CHECKPOINT_KIND: &str = "train-state";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainManifest {
    pub format_version: u32,
    pub kind: String,
    pub iteration: u64,
    pub seed: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    pub architecture: Vec<(String, Vec<String>)>,
    pub weights: LossWeights,
    pub opt: OptimizerSpec,
    pub ramp_iters: u64,
    pub train_iters: u64,
    pub adam_t_ge: u64,
    pub adam_t_d: u64,
    pub config_fingerprint: String,
    pub arrays: Vec<ArrayEntry>,
}

impl Manifest for TrainManifest {
    fn format_version(&self) -> u32 {
        self.format_version
    }
    fn arrays(&self) -> &[ArrayEntry] {
        &self.arrays
    }
}

/// Loads (or synthesizes and caches) the train/test datasets for a config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Shapes => {
            let train = cached_shapes(cfg, Split::Train)?;
            let test = cached_shapes(cfg, Split::Test)?;
            Ok((train, test))
        }
        DatasetKind::Mnist => {
            let d = &cfg.data_dir;
            let train = idx::load_idx(
                &d.join("train-images-idx3-ubyte"),
                &d.join("train-labels-idx1-ubyte"),
                Split::Train,
            )?;
            let test = idx::load_idx(
                &d.join("t10k-images-idx3-ubyte"),
                &d.join("t10k-labels-idx1-ubyte"),
                Split::Test,
            )?;
            Ok((train, test))
        }
        DatasetKind::Svhn => {
            let d = &cfg.data_dir;
            let train = idx::load_idx(
                &d.join("svhn-train-images.idx"),
                &d.join("svhn-train-labels.idx"),
                Split::Train,
            )?;
            let test = idx::load_idx(
                &d.join("svhn-test-images.idx"),
                &d.join("svhn-test-labels.idx"),
                Split::Test,
            )?;
            Ok((train, test))
        }
    }
}

/// Shapes datasets are cached as IDX pairs keyed by their parameters, so
/// repeated runs (and the oracle trainer) see identical bytes.
fn cached_shapes(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let (n, tag, seed) = match split {
        Split::Train => (cfg.train_samples, "train", cfg.data_seed),
        Split::Test => (cfg.test_samples, "test", cfg.data_seed.wrapping_add(1)),
    };
    let size = cfg.image.0;
    std::fs::create_dir_all(&cfg.data_dir)?;
    let images_path = cfg
        .data_dir
        .join(format!("shapes-{tag}-{n}-{size}-{seed}-images.idx"));
    let labels_path = cfg
        .data_dir
        .join(format!("shapes-{tag}-{n}-{size}-{seed}-labels.idx"));
    if images_path.exists() && labels_path.exists() {
        return idx::load_idx(&images_path, &labels_path, split);
    }
    let mut rng = Rng::seed_from_u64(seed);
    let (ds, _) = shapes::make_shapes(n, size, split, &mut rng)?;
    idx::write_dataset(&ds, &images_path, &labels_path)?;
    Ok(ds)
}

/// Result of a training run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<LossReport>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Runs (or resumes) training per the config, writing the CSV loss log and
/// periodic checkpoints into `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (train_ds, _) = load_datasets(cfg)?;
    if cfg.labeled_count > train_ds.len() {
        return Err(Error::config(format!(
            "labeled_count {} exceeds training set size {}",
            cfg.labeled_count,
            train_ds.len()
        )));
    }
    let ratio = cfg.labeled_count as f64 / train_ds.len() as f64;
    // Subset selection runs on its own stream so a resumed run rebuilds the
    // identical subset before restoring the training stream.
    let mut setup_rng = Rng::seed_from_u64(cfg.seed ^ SETUP_SALT);
    let subset = data::select_labeled(&train_ds, cfg.labeled_count, &mut setup_rng)?;

    let mut state = match resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.fingerprint != cfg.fingerprint() {
                return Err(Error::config(format!(
                    "checkpoint fingerprint {} does not match this configuration ({})",
                    state.fingerprint,
                    cfg.fingerprint()
                )));
            }
            state
        }
        None => TrainState::init(cfg)?,
    };

    let log_path = out_dir.join("loss_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "{}", LossReport::CSV_HEADER)?;
    let checkpoint_path = out_dir.join("checkpoint.fgc");
    let preset = cfg.schedule_preset();
    let mut reports = Vec::new();
    while state.iter < cfg.iters {
        let p = labeled_prob_at(state.iter, ratio, &preset)?;
        let batch = data::draw_batch(&train_ds, &subset, p, cfg.opt.batch_size, &mut state.rng)?;
        let report = match state.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                // Leave a diagnostic snapshot behind before aborting.
                let _ = state.save(&out_dir.join("diagnostic.fgc"));
                return Err(e);
            }
        };
        writeln!(log, "{}", report.csv_row())?;
        reports.push(report);
        if state.iter % cfg.checkpoint_every == 0 {
            log.flush()?;
            state.save(&checkpoint_path)?;
        }
    }
    log.flush()?;
    state.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        state,
        reports,
        checkpoint_path,
        log_path,
    })
}
