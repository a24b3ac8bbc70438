//! Rough per-phase timing probe (not part of the test suite).
use factorgen::config::{DatasetKind, RunConfig};
use factorgen::latent::CodeBatch;
use factorgen::models::Model;
use factorgen::nn::Phase;
use factorgen::trainer::{assemble_code, discriminator_pass, generator_encoder_pass};
use factorgen::Rng;
use ndarray::Array4;
use rand::{Rng as _, SeedableRng};
use std::time::Instant;

fn main() {
    let cfg = RunConfig::preset(DatasetKind::Shapes);
    let model_cfg =
        factorgen::netspec::build_family(cfg.family, &cfg.latent, cfg.image).unwrap();
    let mut rng = Rng::seed_from_u64(1);
    let model: Model<f32> = Model::init(model_cfg, &mut rng).unwrap();
    let n = 64;
    let images = Array4::from_shape_fn((n, 16, 16, 1), |_| rng.random::<f32>());
    let labels = ndarray::Array2::from_elem((n, 1), 0i64);
    let mask = ndarray::Array2::from_elem((n, 1), true);
    let z = CodeBatch::<f32>::sample(&cfg.latent, n, &mut rng);
    let reps = 5;

    let t = Instant::now();
    for _ in 0..reps {
        let _ = model.enc.forward(&images, Phase::Train, true).unwrap();
    }
    println!("enc fwd+cache: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = model.gen.forward(&z.flat(), Phase::Train, true).unwrap();
    }
    println!("gen fwd+cache: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let enc = model.enc.forward(&images, Phase::Train, true).unwrap();
    let (code, _) = assemble_code(&enc.out);
    let t = Instant::now();
    for _ in 0..reps {
        let mut r2 = Rng::seed_from_u64(9);
        let _ = model
            .disc
            .forward(&images, &code, Phase::Train, Some(&mut r2), true)
            .unwrap();
    }
    println!("disc fwd+cache: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let mut r2 = Rng::seed_from_u64(5);
        let _ = discriminator_pass(&model, &images, &z, 1.0, &mut r2).unwrap();
    }
    println!("full D pass: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let mut r2 = Rng::seed_from_u64(5);
    let d = discriminator_pass(&model, &images, &z, 1.0, &mut r2).unwrap();
    let w = factorgen::losses::LossWeights::default();
    let t = Instant::now();
    for _ in 0..reps {
        let mut r3 = Rng::seed_from_u64(6);
        let _ =
            generator_encoder_pass(&model, &images, &labels, &mask, &z, &d, &w, &mut r3).unwrap();
    }
    println!("full GE pass: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
}
