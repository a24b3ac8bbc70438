//! Evaluation protocol: an independently trained oracle classifier scores
//! generated samples per requested class, the encoder is scored on the
//! labeled test split, and the qualitative grids (class sweeps, continuous
//! sweeps, translations, interpolations) are rendered to PNG.

use crate::checkpoint::{self, ArrayEntry, Manifest};
use crate::data::{idx, Dataset};
use crate::error::{Error, Result};
use crate::latent::{sample_code, LatentSpec};
use crate::losses;
use crate::models::{Encoder, EncoderOutput, Generator, Model};
use crate::netspec::{Activation, Family, LayerDesc, SeqConfig};
use crate::nn::{Feat, NetGrads, Phase, SequentialNet};
use crate::schedule::{adam_step_net, AdamState};
use crate::trainer::assemble_code;
use crate::Rng;
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Anything that can classify an image batch; the oracle implements this,
/// and tests can substitute exact mocks.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn classify(&self, images: &Array4<f32>) -> Result<Vec<usize>>;
}

/// Training settings for the oracle classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub accuracy_floor: f64,
}

impl OracleConfig {
    pub fn shapes() -> Self {
        OracleConfig {
            iters: 1200,
            batch_size: 64,
            lr: 3e-4,
            seed: 7,
            accuracy_floor: 0.98,
        }
    }

    pub fn mnist() -> Self {
        OracleConfig {
            iters: 8000,
            batch_size: 64,
            lr: 3e-4,
            seed: 7,
            accuracy_floor: 0.99,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleManifest {
    pub format_version: u32,
    pub kind: String,
    pub n_classes: usize,
    pub image: (usize, usize, usize),
    pub network: SeqConfig,
    pub backbone: Vec<String>,
    pub test_accuracy: f64,
    pub accuracy_floor: f64,
    pub warning: Option<String>,
    pub trained_iters: u64,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
}

impl Manifest for OracleManifest {
    fn format_version(&self) -> u32 {
        self.format_version
    }
    fn arrays(&self) -> &[ArrayEntry] {
        &self.arrays
    }
}

const ORACLE_KIND: &str = "oracle";

/// Convolutional classifier reusing the encoder stack of the given family
/// with a plain softmax head. Its manifest records the measured test
/// accuracy so downstream scores are auditable.
pub struct OracleClassifier {
    pub net: SequentialNet<f32>,
    pub config: SeqConfig,
    pub n_classes: usize,
    pub image: (usize, usize, usize),
    pub test_accuracy: f64,
    pub accuracy_floor: f64,
    pub warning: Option<String>,
    pub trained_iters: u64,
    pub seed: u64,
}

impl Classifier for OracleClassifier {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn classify(&self, images: &Array4<f32>) -> Result<Vec<usize>> {
        let out = self
            .net
            .forward(Feat::T(images.clone()), Phase::Eval, None, false)?
            .out
            .into_m()?;
        Ok(argmax_rows(&out))
    }
}

/// Index of the first maximal entry per row.
fn argmax_rows(m: &Array2<f32>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// The oracle architecture: the family's encoder stack with its structured
/// head replaced by a K-way linear layer (softmax applied in the loss).
pub fn oracle_config(family: Family, image: (usize, usize, usize), n_classes: usize) -> Result<SeqConfig> {
    // The latent spec below only shapes the encoder head, which is dropped.
    let spec = LatentSpec::new(1, vec![n_classes.max(2)], 0)?;
    let model = crate::netspec::build_family(family, &spec, image)?;
    let mut layers = model.encoder.layers;
    layers.pop();
    layers.push(LayerDesc::Dense {
        units: n_classes,
        batch_norm: false,
        activation: Activation::Linear,
    });
    Ok(SeqConfig {
        input: model.encoder.input,
        layers,
    })
}

/// Trains the oracle on the fully labeled training split and records its
/// test accuracy. Deterministic given the seed.
pub fn train_oracle(
    train: &Dataset,
    test: &Dataset,
    family: Family,
    cfg: &OracleConfig,
) -> Result<OracleClassifier> {
    let n_classes = 1 + train
        .labels
        .iter()
        .filter_map(|l| l.first().copied().flatten())
        .max()
        .ok_or_else(|| Error::invalid("oracle training needs class labels"))? as usize;
    let net_cfg = oracle_config(family, train.image_shape(), n_classes)?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut net: SequentialNet<f32> = crate::models::init_seq(&net_cfg, &mut rng)?;
    let mut adam = AdamState::for_net(&net);
    let n = train.len();
    let (h, w, c) = train.image_shape();
    for _ in 0..cfg.iters {
        let mut images = Array4::<f32>::zeros((cfg.batch_size, h, w, c));
        let mut targets = vec![0usize; cfg.batch_size];
        for i in 0..cfg.batch_size {
            let idx = rng.random_range(0..n);
            images
                .index_axis_mut(Axis(0), i)
                .assign(&train.images.index_axis(Axis(0), idx));
            targets[i] = train.class_of(idx).ok_or_else(|| {
                Error::invalid("oracle training set has unlabeled samples")
            })? as usize;
        }
        let fwd = net.forward(Feat::T(images), Phase::Train, Some(&mut rng), true)?;
        let logits = fwd.out.as_m()?;
        let probs = crate::models::softmax_rows(logits);
        // Softmax cross-entropy gradient, averaged over the batch.
        let mut glogits = probs.clone();
        let scale = 1.0 / cfg.batch_size as f32;
        for (i, &t) in targets.iter().enumerate() {
            glogits[[i, t]] -= 1.0;
        }
        glogits.mapv_inplace(|v| v * scale);
        let mut grads = NetGrads::zeros_of(&net);
        net.backward(
            fwd.cache.as_ref().expect("cached forward"),
            Feat::M(glogits),
            Some(&mut grads),
        )?;
        adam_step_net(&mut net, &grads, &mut adam, cfg.lr, 0.9, 0.999, 1e-8)?;
        net.apply_batch_stats(&fwd.stats);
    }
    let oracle = OracleClassifier {
        net,
        config: net_cfg,
        n_classes,
        image: train.image_shape(),
        test_accuracy: 0.0,
        accuracy_floor: cfg.accuracy_floor,
        warning: None,
        trained_iters: cfg.iters,
        seed: cfg.seed,
    };
    let acc = classifier_accuracy(&oracle, test)?;
    let warning = (acc < cfg.accuracy_floor).then(|| {
        format!(
            "test accuracy {acc:.4} below the {:.4} floor",
            cfg.accuracy_floor
        )
    });
    Ok(OracleClassifier {
        test_accuracy: acc,
        warning,
        ..oracle
    })
}

/// Accuracy of any classifier on a labeled dataset.
pub fn classifier_accuracy(clf: &dyn Classifier, data: &Dataset) -> Result<f64> {
    let n = data.len();
    let mut correct = 0usize;
    let mut counted = 0usize;
    for start in (0..n).step_by(256) {
        let stop = (start + 256).min(n);
        let batch = data.images.slice(s![start..stop, .., .., ..]).to_owned();
        let preds = clf.classify(&batch)?;
        for (i, pred) in preds.iter().enumerate() {
            if let Some(label) = data.class_of(start + i) {
                counted += 1;
                if *pred == label as usize {
                    correct += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(Error::invalid("dataset has no labeled samples to score"));
    }
    Ok(correct as f64 / counted as f64)
}

impl OracleClassifier {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(String, Vec<f32>)> = Vec::new();
        self.net
            .for_each_state(&mut |name, s| arrays.push((name, s.to_vec())));
        let manifest = OracleManifest {
            format_version: checkpoint::FORMAT_VERSION,
            kind: ORACLE_KIND.to_string(),
            n_classes: self.n_classes,
            image: self.image,
            network: self.config.clone(),
            backbone: self.config.describe(),
            test_accuracy: self.test_accuracy,
            accuracy_floor: self.accuracy_floor,
            warning: self.warning.clone(),
            trained_iters: self.trained_iters,
            seed: self.seed,
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

    pub fn load(path: &Path) -> Result<OracleClassifier> {
        let (manifest, arrays) = checkpoint::read_container::<OracleManifest>(path)?;
        if manifest.kind != ORACLE_KIND {
            return Err(Error::invalid(format!(
                "checkpoint kind '{}' is not an oracle",
                manifest.kind
            )));
        }
        if manifest.backbone != manifest.network.describe() {
            return Err(Error::config(
                "oracle architecture echo does not match its configuration",
            ));
        }
        let mut scratch = Rng::seed_from_u64(0);
        let mut net: SequentialNet<f32> = crate::models::init_seq(&manifest.network, &mut scratch)?;
        let mut expected: Vec<(String, usize)> = Vec::new();
        net.for_each_state(&mut |name, s| expected.push((name, s.len())));
        if expected.len() != arrays.len()
            || expected
                .iter()
                .zip(&arrays)
                .any(|((en, el), (an, ad))| en != an || *el != ad.len())
        {
            return Err(Error::config(
                "oracle arrays do not match the declared architecture",
            ));
        }
        let mut it = arrays.into_iter();
        net.for_each_state_mut(&mut |_, s| {
            let (_, data) = it.next().expect("inventory verified");
            s.copy_from_slice(&data);
        });
        Ok(OracleClassifier {
            net,
            config: manifest.network,
            n_classes: manifest.n_classes,
            image: manifest.image,
            test_accuracy: manifest.test_accuracy,
            accuracy_floor: manifest.accuracy_floor,
            warning: manifest.warning,
            trained_iters: manifest.trained_iters,
            seed: manifest.seed,
        })
    }
}

/// Quantitative scores for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_error: Vec<f64>,
    pub overall_error: f64,
    pub encoder_accuracy: Option<f64>,
    pub per_class: usize,
    pub seed: u64,
    pub runs: usize,
}

impl EvalReport {
    /// Structured text form, one `key: value` per line.
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("runs: {}\n", self.runs));
        out.push_str(&format!("seed: {}\n", self.seed));
        out.push_str(&format!("samples_per_class: {}\n", self.per_class));
        out.push_str(&format!(
            "generator_error_percent: {:.4}\n",
            self.overall_error * 100.0
        ));
        if let Some(acc) = self.encoder_accuracy {
            out.push_str(&format!("encoder_accuracy_percent: {:.4}\n", acc * 100.0));
        }
        out
    }

    /// Per-class error table as CSV.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,error_percent\n");
        for (k, e) in self.per_class_error.iter().enumerate() {
            out.push_str(&format!("{k},{:.4}\n", e * 100.0));
        }
        out
    }

    /// Averages reports from independent runs.
    pub fn aggregate(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let k = first.per_class_error.len();
        let mut per_class = vec![0.0; k];
        let mut overall = 0.0;
        let mut acc_sum = 0.0;
        let mut acc_count = 0usize;
        for r in reports {
            for (slot, e) in per_class.iter_mut().zip(&r.per_class_error) {
                *slot += e / reports.len() as f64;
            }
            overall += r.overall_error / reports.len() as f64;
            if let Some(a) = r.encoder_accuracy {
                acc_sum += a;
                acc_count += 1;
            }
        }
        Some(EvalReport {
            per_class_error: per_class,
            overall_error: overall,
            encoder_accuracy: (acc_count > 0).then(|| acc_sum / acc_count as f64),
            per_class: first.per_class,
            seed: first.seed,
            runs: reports.iter().map(|r| r.runs).sum(),
        })
    }
}

/// Scores the generator: for every class of the first categorical block,
/// generate `per_class` images with that class requested (all other latent
/// parts random) and count oracle disagreements.
pub fn generator_error(
    gen: &Generator<f32>,
    spec: &LatentSpec,
    oracle: &dyn Classifier,
    per_class: usize,
    rng: &mut Rng,
) -> Result<EvalReport> {
    let k = *spec
        .cat_dims
        .first()
        .ok_or_else(|| Error::invalid("latent spec has no categorical block"))?;
    if k != oracle.n_classes() {
        return Err(Error::invalid(format!(
            "class block has {k} categories but the oracle scores {}",
            oracle.n_classes()
        )));
    }
    let seed_echo = rng.get_word_pos() as u64;
    let mut per_class_error = Vec::with_capacity(k);
    for class in 0..k {
        let mut wrong = 0usize;
        let mut done = 0usize;
        while done < per_class {
            let batch = (per_class - done).min(128);
            let codes: Vec<_> = (0..batch)
                .map(|_| {
                    sample_code(spec, rng)
                        .with_category(0, class)
                        .expect("class index in range")
                })
                .collect();
            let flat = crate::latent::CodeBatch::<f32>::from_codes(spec, &codes)?.flat();
            let images = gen.forward(&flat, Phase::Eval, false)?.images;
            let preds = oracle.classify(&images)?;
            wrong += preds.iter().filter(|&&p| p != class).count();
            done += batch;
        }
        per_class_error.push(wrong as f64 / per_class as f64);
    }
    let overall_error = per_class_error.iter().sum::<f64>() / k as f64;
    Ok(EvalReport {
        per_class_error,
        overall_error,
        encoder_accuracy: None,
        per_class,
        seed: seed_echo,
        runs: 1,
    })
}

/// Fraction of test samples whose class-block posterior argmax matches the
/// label.
pub fn encoder_accuracy(enc: &Encoder<f32>, test: &Dataset) -> Result<f64> {
    let n = test.len();
    let mut correct = 0usize;
    let mut counted = 0usize;
    for start in (0..n).step_by(256) {
        let stop = (start + 256).min(n);
        let batch = test.images.slice(s![start..stop, .., .., ..]).to_owned();
        let out = enc.forward(&batch, Phase::Eval, false)?;
        let preds = argmax_rows(&out.out.cat_logits[0]);
        for (i, pred) in preds.iter().enumerate() {
            if let Some(label) = test.class_of(start + i) {
                counted += 1;
                if *pred == label as usize {
                    correct += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(Error::invalid("test set has no labeled samples"));
    }
    Ok(correct as f64 / counted as f64)
}

/// Test-set reconstruction loss under the training-time definition
/// (deterministic code: `u_hat`, soft class probabilities, continuous
/// means), evaluated with running statistics.
pub fn test_reconstruction_loss(model: &Model<f32>, test: &Dataset) -> Result<f64> {
    let n = test.len();
    let mut total = 0.0f64;
    let mut batches = 0usize;
    for start in (0..n).step_by(128) {
        let stop = (start + 128).min(n);
        let batch = test.images.slice(s![start..stop, .., .., ..]).to_owned();
        let enc = model.enc.forward(&batch, Phase::Eval, false)?;
        let (code, _) = assemble_code(&enc.out);
        let rec = model.gen.forward(&code, Phase::Eval, false)?;
        total += losses::reconstruction_loss(&batch, &rec.images)? as f64;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Agreement between requested and recovered class over fresh codes:
/// fraction where argmax(E(G(Z)) class posterior) equals the class of Z.
pub fn code_round_trip_agreement(
    model: &Model<f32>,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let spec = &model.enc.spec;
    let mut agree = 0usize;
    let mut done = 0usize;
    while done < n {
        let batch = (n - done).min(128);
        let z = crate::latent::CodeBatch::<f32>::sample(spec, batch, rng);
        let images = model.gen.forward(&z.flat(), Phase::Eval, false)?.images;
        let enc = model.enc.forward(&images, Phase::Eval, false)?;
        let preds = argmax_rows(&enc.out.cat_logits[0]);
        for (i, pred) in preds.iter().enumerate() {
            let requested = z.cats[0]
                .row(i)
                .iter()
                .position(|&p| p == 1.0)
                .expect("sampled codes are one-hot");
            if *pred == requested {
                agree += 1;
            }
        }
        done += batch;
    }
    Ok(agree as f64 / n as f64)
}

/// Deterministic eval-time code for an encoded image: `u_hat`, hard
/// one-hot class blocks (posterior argmax), continuous means. Hardening
/// makes translation to a sample's own class exactly the reconstruction.
pub fn eval_code(enc_out: &EncoderOutput<f32>) -> Array2<f32> {
    let n = enc_out.u_hat.nrows();
    let spec_width = enc_out.u_hat.ncols()
        + enc_out.cat_logits.iter().map(|l| l.ncols()).sum::<usize>()
        + enc_out.cont_mean.ncols();
    let mut out = Array2::<f32>::zeros((n, spec_width));
    let mut pos = 0;
    out.slice_mut(s![.., ..enc_out.u_hat.ncols()])
        .assign(&enc_out.u_hat);
    pos += enc_out.u_hat.ncols();
    for logits in &enc_out.cat_logits {
        let hot = argmax_rows(logits);
        for (i, &h) in hot.iter().enumerate() {
            out[[i, pos + h]] = 1.0;
        }
        pos += logits.ncols();
    }
    out.slice_mut(s![.., pos..pos + enc_out.cont_mean.ncols()])
        .assign(&enc_out.cont_mean);
    out
}

/// A grid of image tiles, row-major.
pub struct ImageGrid {
    pub tiles: Vec<Vec<Array3<f32>>>,
}

fn image_rows(images: &Array4<f32>) -> Vec<Array3<f32>> {
    (0..images.shape()[0])
        .map(|i| images.index_axis(Axis(0), i).to_owned())
        .collect()
}

/// Class sweep: one row per class of block 0, one column per sampled code
/// (`u`, continuous part, and any other blocks held fixed down a column).
pub fn class_sweep_grid(
    gen: &Generator<f32>,
    spec: &LatentSpec,
    columns: usize,
    rng: &mut Rng,
) -> Result<ImageGrid> {
    let k = *spec
        .cat_dims
        .first()
        .ok_or_else(|| Error::invalid("latent spec has no categorical block"))?;
    let col_codes: Vec<_> = (0..columns).map(|_| sample_code(spec, rng)).collect();
    let mut tiles = Vec::with_capacity(k);
    for class in 0..k {
        let codes: Vec<_> = col_codes
            .iter()
            .map(|c| c.with_category(0, class).expect("class in range"))
            .collect();
        let flat = crate::latent::CodeBatch::<f32>::from_codes(spec, &codes)?.flat();
        let images = gen.forward(&flat, Phase::Eval, false)?.images;
        tiles.push(image_rows(&images));
    }
    Ok(ImageGrid { tiles })
}

/// Continuous sweep: each row fixes a sampled code and varies one
/// continuous dimension from -1 to 1 across the columns.
pub fn continuous_sweep_grid(
    gen: &Generator<f32>,
    spec: &LatentSpec,
    dim: usize,
    steps: usize,
    rows: usize,
    rng: &mut Rng,
) -> Result<ImageGrid> {
    if dim >= spec.cont_dim {
        return Err(Error::invalid(format!(
            "continuous dimension {dim} out of range ({} available)",
            spec.cont_dim
        )));
    }
    if steps < 2 {
        return Err(Error::invalid("a sweep needs at least 2 steps"));
    }
    let mut tiles = Vec::with_capacity(rows);
    for _ in 0..rows {
        let base = sample_code(spec, rng);
        let codes: Vec<_> = (0..steps)
            .map(|j| {
                let mut c = base.clone();
                c.cont[dim] = -1.0 + 2.0 * j as f64 / (steps - 1) as f64;
                c
            })
            .collect();
        let flat = crate::latent::CodeBatch::<f32>::from_codes(spec, &codes)?.flat();
        let images = gen.forward(&flat, Phase::Eval, false)?.images;
        tiles.push(image_rows(&images));
    }
    Ok(ImageGrid { tiles })
}

/// Translation grid: column 0 holds the input images bit-for-bit; column
/// 1+k holds the input re-generated with its class block overwritten to
/// class `classes[k]`.
pub fn translate_grid(
    model: &Model<f32>,
    images: &Array4<f32>,
    classes: &[usize],
) -> Result<ImageGrid> {
    let spec = &model.enc.spec;
    let k = *spec
        .cat_dims
        .first()
        .ok_or_else(|| Error::invalid("latent spec has no categorical block"))?;
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!(
            "target class {bad} out of range (block has {k})"
        )));
    }
    let enc = model.enc.forward(images, Phase::Eval, false)?;
    let codes = eval_code(&enc.out);
    let n = images.shape()[0];
    let mut tiles: Vec<Vec<Array3<f32>>> = image_rows(images)
        .into_iter()
        .map(|t| vec![t])
        .collect();
    for &class in classes {
        let mut edited = codes.clone();
        let class_off = spec.u_dim;
        for i in 0..n {
            for j in 0..k {
                edited[[i, class_off + j]] = if j == class { 1.0 } else { 0.0 };
            }
        }
        let out = model.gen.forward(&edited, Phase::Eval, false)?.images;
        for (row, tile) in tiles.iter_mut().zip(image_rows(&out)) {
            row.push(tile);
        }
    }
    Ok(ImageGrid { tiles })
}

/// Reconstructions through the eval-time code (hard class blocks); equals
/// translation to each sample's own encoded class.
pub fn reconstruct_images(model: &Model<f32>, images: &Array4<f32>) -> Result<Array4<f32>> {
    let enc = model.enc.forward(images, Phase::Eval, false)?;
    let codes = eval_code(&enc.out);
    Ok(model.gen.forward(&codes, Phase::Eval, false)?.images)
}

/// Interpolation grid: for each (a, b) image pair one row whose first and
/// last columns are the real images and whose interior columns are
/// generated from linear code interpolations.
pub fn interpolate_grid(
    model: &Model<f32>,
    pairs: &[(Array3<f32>, Array3<f32>)],
    steps: usize,
) -> Result<ImageGrid> {
    if steps < 3 {
        return Err(Error::invalid(
            "interpolation needs at least 3 columns (two endpoints and an interior)",
        ));
    }
    let spec = model.enc.spec.clone();
    let mut tiles = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let mut stacked = Array4::<f32>::zeros((
            2,
            a.shape()[0],
            a.shape()[1],
            a.shape()[2],
        ));
        stacked.index_axis_mut(Axis(0), 0).assign(a);
        stacked.index_axis_mut(Axis(0), 1).assign(b);
        let enc = model.enc.forward(&stacked, Phase::Eval, false)?;
        let codes = eval_code(&enc.out);
        let code_a = crate::latent::LatentCode::unflatten(
            &spec,
            &codes.row(0).iter().map(|&v| v as f64).collect::<Vec<_>>(),
        )?;
        let code_b = crate::latent::LatentCode::unflatten(
            &spec,
            &codes.row(1).iter().map(|&v| v as f64).collect::<Vec<_>>(),
        )?;
        let interior: Vec<_> = (1..steps - 1)
            .map(|j| {
                let t = j as f64 / (steps - 1) as f64;
                crate::latent::interpolate(&code_a, &code_b, t).expect("same spec")
            })
            .collect();
        let flat = crate::latent::CodeBatch::<f32>::from_codes(&spec, &interior)?.flat();
        let generated = model.gen.forward(&flat, Phase::Eval, false)?.images;
        let mut row = Vec::with_capacity(steps);
        row.push(a.clone());
        row.extend(image_rows(&generated));
        row.push(b.clone());
        tiles.push(row);
    }
    Ok(ImageGrid { tiles })
}

/// Canonical grid file name.
pub fn grid_file_name(mode: &str, iter: u64, seed: u64) -> String {
    format!("{mode}_{iter}_{seed}.png")
}

const GRID_GAP: usize = 2;
const GRID_GAP_VALUE: u8 = 128;

/// Renders the grid as an 8-bit PNG with 2-pixel separators.
pub fn save_grid_png(grid: &ImageGrid, path: &Path) -> Result<()> {
    let rows = grid.tiles.len();
    let cols = grid.tiles.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("cannot render an empty grid"));
    }
    let (h, w, c) = {
        let t = &grid.tiles[0][0];
        (t.shape()[0], t.shape()[1], t.shape()[2])
    };
    if !matches!(c, 1 | 3) {
        return Err(Error::invalid(format!(
            "grids support 1- or 3-channel tiles, got {c}"
        )));
    }
    let out_h = rows * h + (rows - 1) * GRID_GAP;
    let out_w = cols * w + (cols - 1) * GRID_GAP;
    let mut canvas = vec![GRID_GAP_VALUE; out_h * out_w * c];
    for (r, row) in grid.tiles.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::invalid("ragged grid rows"));
        }
        for (col, tile) in row.iter().enumerate() {
            if tile.shape() != [h, w, c] {
                return Err(Error::invalid("grid tiles differ in shape"));
            }
            let y0 = r * (h + GRID_GAP);
            let x0 = col * (w + GRID_GAP);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        canvas[((y0 + y) * out_w + x0 + x) * c + ch] =
                            idx::pixel_to_byte(tile[[y, x, ch]]);
                    }
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let ok = match c {
        1 => image::GrayImage::from_raw(out_w as u32, out_h as u32, canvas)
            .expect("canvas sized above")
            .save(path),
        _ => image::RgbImage::from_raw(out_w as u32, out_h as u32, canvas)
            .expect("canvas sized above")
            .save(path),
    };
    ok.map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::netspec::build_mnist_family;

    struct ConstantClassifier {
        k: usize,
        answer: usize,
    }

    impl Classifier for ConstantClassifier {
        fn n_classes(&self) -> usize {
            self.k
        }
        fn classify(&self, images: &Array4<f32>) -> Result<Vec<usize>> {
            Ok(vec![self.answer; images.shape()[0]])
        }
    }

    /// Pretends to read the requested class off a marker pixel, so it
    /// always agrees with the request.
    struct EchoClassifier {
        k: usize,
        seen: std::cell::RefCell<Vec<usize>>,
        script: std::cell::RefCell<Vec<usize>>,
    }

    impl Classifier for EchoClassifier {
        fn n_classes(&self) -> usize {
            self.k
        }
        fn classify(&self, images: &Array4<f32>) -> Result<Vec<usize>> {
            let mut script = self.script.borrow_mut();
            let take: Vec<usize> = script.drain(..images.shape()[0]).collect();
            self.seen.borrow_mut().extend(take.iter().copied());
            Ok(take)
        }
    }

    fn tiny_model() -> Model<f32> {
        let spec = LatentSpec::new(2, vec![3], 1).unwrap();
        let cfg = build_mnist_family(&spec, (8, 8, 1)).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        Model::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn constant_classifier_gives_k_minus_1_over_k_error() {
        // A generator whose outputs always land in one oracle class yields
        // exactly (K-1)/K overall error: the uniform-guess baseline.
        let model = tiny_model();
        let oracle = ConstantClassifier { k: 3, answer: 1 };
        let mut rng = Rng::seed_from_u64(3);
        let report =
            generator_error(&model.gen, &model.enc.spec, &oracle, 30, &mut rng).unwrap();
        assert_eq!(report.per_class_error, vec![1.0, 0.0, 1.0]);
        assert!((report.overall_error - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfectly_agreeing_oracle_gives_zero_error() {
        let model = tiny_model();
        // Script: class blocks are requested in order 0,0,..,1,1,..,2,2,..
        let script: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 10)).collect();
        let oracle = EchoClassifier {
            k: 3,
            seen: Default::default(),
            script: std::cell::RefCell::new(script),
        };
        let mut rng = Rng::seed_from_u64(4);
        let report =
            generator_error(&model.gen, &model.enc.spec, &oracle, 10, &mut rng).unwrap();
        assert_eq!(report.overall_error, 0.0);
    }

    #[test]
    fn class_count_mismatch_is_an_argument_error() {
        let model = tiny_model();
        let oracle = ConstantClassifier { k: 10, answer: 0 };
        let mut rng = Rng::seed_from_u64(5);
        assert!(generator_error(&model.gen, &model.enc.spec, &oracle, 5, &mut rng).is_err());
    }

    #[test]
    fn uniform_encoder_scores_chance_accuracy() {
        let mut model = tiny_model();
        // Zero the encoder: logits all equal, argmax picks class 0.
        model
            .enc
            .net
            .for_each_state_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
        let mut rng = Rng::seed_from_u64(6);
        let (test, _) =
            crate::data::shapes::make_shapes(300, 16, Split::Test, &mut rng).unwrap();
        // 8x8 model cannot read 16x16 shapes; rebuild a 16x16 encoder.
        let spec = LatentSpec::new(2, vec![3], 1).unwrap();
        let cfg = build_mnist_family(&spec, (16, 16, 1)).unwrap();
        let mut rng2 = Rng::seed_from_u64(7);
        let mut model16: Model<f32> = Model::init(cfg, &mut rng2).unwrap();
        model16
            .enc
            .net
            .for_each_state_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
        let acc = encoder_accuracy(&model16.enc, &test).unwrap();
        let class0 = (0..test.len())
            .filter(|&i| test.class_of(i) == Some(0))
            .count() as f64
            / test.len() as f64;
        assert!((acc - class0).abs() < 1e-12);
        assert!((acc - 1.0 / 3.0).abs() < 0.1);
    }

    #[test]
    fn accuracy_plus_error_is_exactly_one() {
        let mut rng = Rng::seed_from_u64(8);
        let (test, _) = crate::data::shapes::make_shapes(100, 16, Split::Test, &mut rng).unwrap();
        let spec = LatentSpec::new(2, vec![3], 1).unwrap();
        let cfg = build_mnist_family(&spec, (16, 16, 1)).unwrap();
        let model: Model<f32> = Model::init(cfg, &mut Rng::seed_from_u64(9)).unwrap();
        let acc = encoder_accuracy(&model.enc, &test).unwrap();
        let preds_correct = acc * test.len() as f64;
        let err = 1.0 - acc;
        assert!((acc + err - 1.0).abs() < 1e-15);
        assert!((preds_correct - preds_correct.round()).abs() < 1e-9);
    }

    #[test]
    fn class_sweep_has_one_row_per_class() {
        let model = tiny_model();
        let mut rng = Rng::seed_from_u64(10);
        let grid = class_sweep_grid(&model.gen, &model.enc.spec, 4, &mut rng).unwrap();
        assert_eq!(grid.tiles.len(), 3);
        assert!(grid.tiles.iter().all(|row| row.len() == 4));
    }

    #[test]
    fn translation_keeps_input_column_bitwise() {
        let model = tiny_model();
        let mut rng = Rng::seed_from_u64(11);
        let images = Array4::from_shape_fn((2, 8, 8, 1), |_| {
            (rng.random::<f64>() * 255.0).round() as f32 / 255.0
        });
        let grid = translate_grid(&model, &images, &[0, 1, 2]).unwrap();
        assert_eq!(grid.tiles[0].len(), 4);
        for (i, row) in grid.tiles.iter().enumerate() {
            let orig = images.index_axis(Axis(0), i);
            assert_eq!(row[0], orig.to_owned());
        }
    }

    #[test]
    fn no_op_translation_equals_reconstruction() {
        let model = tiny_model();
        let mut rng = Rng::seed_from_u64(12);
        let images = Array4::from_shape_fn((3, 8, 8, 1), |_| rng.random::<f32>());
        let recon = reconstruct_images(&model, &images).unwrap();
        let enc = model.enc.forward(&images, Phase::Eval, false).unwrap();
        let own_class = argmax_rows(&enc.out.cat_logits[0]);
        let grid = translate_grid(&model, &images, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            let translated = &grid.tiles[i][1 + own_class[i]];
            let r = recon.index_axis(Axis(0), i);
            let mse: f32 = translated
                .iter()
                .zip(r.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert_eq!(mse, 0.0);
        }
    }

    #[test]
    fn interpolation_endpoints_are_the_inputs() {
        let model = tiny_model();
        let mut rng = Rng::seed_from_u64(13);
        let a = Array3::from_shape_fn((8, 8, 1), |_| rng.random::<f32>());
        let b = Array3::from_shape_fn((8, 8, 1), |_| rng.random::<f32>());
        let grid = interpolate_grid(&model, &[(a.clone(), b.clone())], 5).unwrap();
        assert_eq!(grid.tiles[0].len(), 5);
        assert_eq!(grid.tiles[0][0], a);
        assert_eq!(grid.tiles[0][4], b);
    }

    #[test]
    fn grid_png_round_trip_dimensions() {
        let model = tiny_model();
        let mut rng = Rng::seed_from_u64(14);
        let grid = class_sweep_grid(&model.gen, &model.enc.spec, 2, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("factorgen-eval-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(grid_file_name("class_sweep", 0, 14));
        save_grid_png(&grid, &path).unwrap();
        let img = image::open(&path).unwrap();
        // 3 rows x 2 cols of 8x8 tiles with 2px separators.
        assert_eq!(img.height(), (3 * 8 + 2 * 2) as u32);
        assert_eq!(img.width(), (2 * 8 + 2) as u32);
    }
}
