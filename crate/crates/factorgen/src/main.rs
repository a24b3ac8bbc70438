//! Command-line entry point: train / generate / translate / interpolate /
//! evaluate / oracle-train over the config and checkpoint formats.

use clap::{Args, Parser, Subcommand};
use factorgen::config::{parse_override, RunConfig};
use factorgen::data::idx;
use factorgen::error::{Error, Result};
use factorgen::eval::{self, OracleClassifier, OracleConfig};
use factorgen::trainer::{self, TrainState};
use factorgen::Rng;
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "factorgen",
    about = "Controllable image generation and multi-domain translation with disentangled latent codes",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Configuration sources shared by commands that resolve a run config.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset preset: mnist, shapes, or svhn.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding (or receiving) dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Number of labeled training samples.
    #[arg(long)]
    labeled_count: Option<usize>,
    /// Training iterations.
    #[arg(long)]
    iters: Option<u64>,
    /// Master seed governing all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut kv = Vec::new();
        if let Some(v) = &self.dataset {
            kv.push(("dataset".to_string(), v.clone()));
        }
        if let Some(v) = &self.data_dir {
            kv.push(("data_dir".to_string(), v.display().to_string()));
        }
        if let Some(v) = self.labeled_count {
            kv.push(("labeled_count".to_string(), v.to_string()));
        }
        if let Some(v) = self.iters {
            kv.push(("iters".to_string(), v.to_string()));
        }
        if let Some(v) = self.seed {
            kv.push(("seed".to_string(), v.to_string()));
        }
        for pair in &self.set {
            kv.push(parse_override(pair)?);
        }
        Ok(kv)
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::from_sources(self.config.as_deref(), &self.overrides()?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (optionally resuming from a checkpoint).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        output_dir: PathBuf,
    },
    /// Render a class sweep (default) or a continuous-dimension sweep.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/generate")]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Columns in the grid (sweep steps).
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Sweep this continuous dimension from -1 to 1 instead of classes.
        #[arg(long)]
        cont_dim: Option<usize>,
        /// Rows for continuous sweeps.
        #[arg(long, default_value_t = 8)]
        rows: usize,
    },
    /// Translate test images into target classes.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file supplying the inputs.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated class list, or `all`.
        #[arg(long, default_value = "all")]
        classes: String,
        /// Input rows to translate.
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value = "runs/translate")]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Interpolate between consecutive pairs of input images.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file supplying the inputs (pairs of consecutive rows).
        #[arg(long)]
        input: PathBuf,
        /// Total columns including both real endpoints.
        #[arg(long, default_value_t = 7)]
        steps: usize,
        /// Number of pairs.
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value = "runs/interpolate")]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Score a trained model against an oracle classifier.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Oracle classifier file.
        #[arg(long)]
        oracle: PathBuf,
        /// Generated samples per class.
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value = "runs/evaluate")]
        output_dir: PathBuf,
    },
    /// Train the oracle classifier on the fully labeled training split.
    OracleTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Oracle training iterations (preset default when omitted).
        #[arg(long)]
        oracle_iters: Option<u64>,
        #[arg(long, default_value = "runs/oracle")]
        output_dir: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    crate_version: String,
    checkpoint_format_version: u32,
    seed: u64,
    resolved_config: Option<std::collections::BTreeMap<String, String>>,
    config_fingerprint: Option<String>,
    overrides: Vec<String>,
}

fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    cfg: Option<&RunConfig>,
    overrides: &[String],
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = RunManifest {
        command: command.to_string(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_format_version: factorgen::checkpoint::FORMAT_VERSION,
        seed,
        resolved_config: cfg.map(|c| c.resolved()),
        config_fingerprint: cfg.map(|c| c.fingerprint()),
        overrides: overrides.to_vec(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(out_dir.join("run_manifest.json"), json)?;
    Ok(())
}

fn load_inputs(path: &Path, rows: usize) -> Result<Array4<f32>> {
    let (pixels, n, h, w) = idx::read_idx_images(path)?;
    let take = rows.min(n);
    let mut out = Array4::<f32>::zeros((take, h, w, 1));
    for i in 0..take {
        for y in 0..h {
            for x in 0..w {
                out[[i, y, x, 0]] = pixels[(i * h + y) * w + x] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            cfg,
            checkpoint,
            output_dir,
        } => {
            let run_cfg = cfg.resolve()?;
            write_run_manifest(&output_dir, "train", run_cfg.seed, Some(&run_cfg), &cfg.set)?;
            let outcome = trainer::train(&run_cfg, &output_dir, checkpoint.as_deref())?;
            println!(
                "trained to iteration {}; checkpoint {}; log {}",
                outcome.state.iter,
                outcome.checkpoint_path.display(),
                outcome.log_path.display()
            );
        }
        Cmd::Generate {
            checkpoint,
            output_dir,
            seed,
            steps,
            cont_dim,
            rows,
        } => {
            let state = TrainState::load(&checkpoint)?;
            write_run_manifest(&output_dir, "generate", seed, None, &[])?;
            let mut rng = Rng::seed_from_u64(seed);
            let spec = &state.model.enc.spec;
            let (grid, mode) = match cont_dim {
                None => (
                    eval::class_sweep_grid(&state.model.gen, spec, steps, &mut rng)?,
                    "class_sweep",
                ),
                Some(dim) => (
                    eval::continuous_sweep_grid(
                        &state.model.gen,
                        spec,
                        dim,
                        steps,
                        rows,
                        &mut rng,
                    )?,
                    "continuous_sweep",
                ),
            };
            let path = output_dir.join(eval::grid_file_name(mode, state.iter, seed));
            eval::save_grid_png(&grid, &path)?;
            println!("wrote {}", path.display());
        }
        Cmd::Translate {
            checkpoint,
            input,
            classes,
            rows,
            output_dir,
            seed,
        } => {
            let state = TrainState::load(&checkpoint)?;
            write_run_manifest(&output_dir, "translate", seed, None, &[])?;
            let images = load_inputs(&input, rows)?;
            let k = state.model.enc.spec.cat_dims[0];
            let class_list: Vec<usize> = if classes == "all" {
                (0..k).collect()
            } else {
                classes
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::invalid(format!("bad class '{s}'")))
                    })
                    .collect::<Result<_>>()?
            };
            let grid = eval::translate_grid(&state.model, &images, &class_list)?;
            let path = output_dir.join(eval::grid_file_name("translate", state.iter, seed));
            eval::save_grid_png(&grid, &path)?;
            println!("wrote {}", path.display());
        }
        Cmd::Interpolate {
            checkpoint,
            input,
            steps,
            rows,
            output_dir,
            seed,
        } => {
            let state = TrainState::load(&checkpoint)?;
            write_run_manifest(&output_dir, "interpolate", seed, None, &[])?;
            let images = load_inputs(&input, rows * 2)?;
            let n_pairs = images.shape()[0] / 2;
            if n_pairs == 0 {
                return Err(Error::invalid("need at least two input images"));
            }
            let pairs: Vec<_> = (0..n_pairs)
                .map(|i| {
                    (
                        images.index_axis(Axis(0), 2 * i).to_owned(),
                        images.index_axis(Axis(0), 2 * i + 1).to_owned(),
                    )
                })
                .collect();
            let grid = eval::interpolate_grid(&state.model, &pairs, steps)?;
            let path = output_dir.join(eval::grid_file_name("interpolate", state.iter, seed));
            eval::save_grid_png(&grid, &path)?;
            println!("wrote {}", path.display());
        }
        Cmd::Evaluate {
            cfg,
            checkpoint,
            oracle,
            per_class,
            output_dir,
        } => {
            let run_cfg = cfg.resolve()?;
            write_run_manifest(
                &output_dir,
                "evaluate",
                run_cfg.seed,
                Some(&run_cfg),
                &cfg.set,
            )?;
            let state = TrainState::load(&checkpoint)?;
            let oracle = OracleClassifier::load(&oracle)?;
            let mut rng = Rng::seed_from_u64(run_cfg.seed);
            let mut report = eval::generator_error(
                &state.model.gen,
                &state.model.enc.spec,
                &oracle,
                per_class,
                &mut rng,
            )?;
            report.seed = run_cfg.seed;
            let (_, test) = trainer::load_datasets(&run_cfg)?;
            report.encoder_accuracy = Some(eval::encoder_accuracy(&state.model.enc, &test)?);
            std::fs::write(output_dir.join("report.txt"), report.text())?;
            std::fs::write(output_dir.join("per_class.csv"), report.per_class_csv())?;
            print!("{}", report.text());
        }
        Cmd::OracleTrain {
            cfg,
            oracle_iters,
            output_dir,
        } => {
            let run_cfg = cfg.resolve()?;
            write_run_manifest(
                &output_dir,
                "oracle-train",
                run_cfg.seed,
                Some(&run_cfg),
                &cfg.set,
            )?;
            let (train, test) = trainer::load_datasets(&run_cfg)?;
            let mut ocfg = match run_cfg.dataset {
                factorgen::config::DatasetKind::Shapes => OracleConfig::shapes(),
                _ => OracleConfig::mnist(),
            };
            ocfg.seed = run_cfg.seed;
            if let Some(it) = oracle_iters {
                ocfg.iters = it;
            }
            let oracle = eval::train_oracle(&train, &test, run_cfg.family, &ocfg)?;
            let path = output_dir.join("oracle.fgc");
            oracle.save(&path)?;
            println!(
                "oracle test accuracy {:.4}{}; wrote {}",
                oracle.test_accuracy,
                oracle
                    .warning
                    .as_ref()
                    .map(|w| format!(" (warning: {w})"))
                    .unwrap_or_default(),
                path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and help problems are validation failures (exit 1);
            // --help / --version print normally and exit 0.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
