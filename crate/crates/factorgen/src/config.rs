//! Run configuration: dataset presets, the flat key=value config file,
//! command-line overrides, and the canonical fingerprint used to tie
//! checkpoints to the configuration that produced them.

use crate::error::{Error, Result};
use crate::latent::LatentSpec;
use crate::losses::LossWeights;
use crate::netspec::Family;
use crate::schedule::{OptimizerSpec, SchedulePreset};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Mnist,
    Shapes,
    Svhn,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Shapes => "shapes",
            DatasetKind::Svhn => "svhn",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "shapes" => Ok(DatasetKind::Shapes),
            "svhn" => Ok(DatasetKind::Svhn),
            other => Err(Error::invalid(format!(
                "unknown dataset '{other}' (expected mnist, shapes, or svhn)"
            ))),
        }
    }
}

/// Fully resolved configuration for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub latent: LatentSpec,
    pub image: (usize, usize, usize),
    pub family: Family,
    pub weights: LossWeights,
    pub opt: OptimizerSpec,
    pub ramp_iters: u64,
    pub iters: u64,
    pub labeled_count: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Seed controlling dataset synthesis (shapes); independent of the run
    /// seed so repeated runs see the same data.
    pub data_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl RunConfig {
    /// Preset defaults for a dataset.
    pub fn preset(dataset: DatasetKind) -> RunConfig {
        let base = RunConfig {
            dataset,
            data_dir: PathBuf::from("data"),
            latent: LatentSpec::mnist(),
            image: (28, 28, 1),
            family: Family::Mnist,
            weights: LossWeights::default(),
            opt: OptimizerSpec::default(),
            ramp_iters: 1000,
            iters: 50_000,
            labeled_count: 100,
            checkpoint_every: 1000,
            seed: 1,
            data_seed: 1234,
            train_samples: 10_000,
            test_samples: 2_000,
        };
        match dataset {
            DatasetKind::Mnist => base,
            DatasetKind::Shapes => RunConfig {
                latent: LatentSpec::shapes(),
                image: (16, 16, 1),
                ramp_iters: SchedulePreset::shapes().ramp_iters,
                iters: SchedulePreset::shapes().train_iters,
                labeled_count: 90,
                ..base
            },
            DatasetKind::Svhn => RunConfig {
                latent: LatentSpec::svhn(),
                image: (32, 32, 3),
                family: Family::SvhnCeleba,
                ramp_iters: SchedulePreset::svhn().ramp_iters,
                iters: SchedulePreset::svhn().train_iters,
                labeled_count: 1000,
                ..base
            },
        }
    }

    pub fn schedule_preset(&self) -> SchedulePreset {
        SchedulePreset {
            ramp_iters: self.ramp_iters,
            train_iters: self.iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.weights.validate()?;
        self.opt.validate()?;
        if self.labeled_count == 0 {
            return Err(Error::config("labeled_count must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        crate::netspec::build_family(self.family, &self.latent, self.image)?;
        Ok(())
    }

    /// Builds a config from an optional file plus key=value overrides
    /// (applied after the file, before validation). Unknown keys are
    /// rejected.
    pub fn from_sources(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut kv: Vec<(String, String)> = Vec::new();
        if let Some(p) = path {
            kv.extend(parse_config_file(p)?);
        }
        kv.extend(overrides.iter().cloned());
        // The dataset key decides which preset supplies the defaults.
        let dataset = kv
            .iter()
            .rev()
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| v.parse::<DatasetKind>())
            .transpose()?
            .unwrap_or(DatasetKind::Shapes);
        let mut cfg = RunConfig::preset(dataset);
        for (key, value) in &kv {
            cfg.apply_key(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::config(format!("key '{key}': cannot parse '{value}'")))
        }
        match key {
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "u_dim" => self.latent.u_dim = num(key, value)?,
            "cat_dims" => {
                self.latent.cat_dims = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "cont_dim" => self.latent.cont_dim = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "ramp_iters" => self.ramp_iters = num(key, value)?,
            "lr_d" => self.opt.lr_d = num(key, value)?,
            "lr_ge" => self.opt.lr_ge = num(key, value)?,
            "beta1" => self.opt.beta1 = num(key, value)?,
            "beta2" => self.opt.beta2 = num(key, value)?,
            "batch_size" => self.opt.batch_size = num(key, value)?,
            "labeled_count" => self.labeled_count = num(key, value)?,
            "lambda_sup" => self.weights.sup = num(key, value)?,
            "lambda_rec" => self.weights.rec = num(key, value)?,
            "lambda_info" => self.weights.info = num(key, value)?,
            "lambda_adv" => self.weights.adv = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "test_samples" => self.test_samples = num(key, value)?,
            other => {
                return Err(Error::config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Canonical key=value view of the resolved configuration.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("dataset", self.dataset.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("u_dim", self.latent.u_dim.to_string());
        put(
            "cat_dims",
            self.latent
                .cat_dims
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("cont_dim", self.latent.cont_dim.to_string());
        put("iters", self.iters.to_string());
        put("ramp_iters", self.ramp_iters.to_string());
        put("lr_d", format!("{:e}", self.opt.lr_d));
        put("lr_ge", format!("{:e}", self.opt.lr_ge));
        put("beta1", self.opt.beta1.to_string());
        put("beta2", self.opt.beta2.to_string());
        put("batch_size", self.opt.batch_size.to_string());
        put("labeled_count", self.labeled_count.to_string());
        put("lambda_sup", self.weights.sup.to_string());
        put("lambda_rec", self.weights.rec.to_string());
        put("lambda_info", self.weights.info.to_string());
        put("lambda_adv", self.weights.adv.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("train_samples", self.train_samples.to_string());
        put("test_samples", self.test_samples.to_string());
        m
    }

    /// Stable fingerprint of everything that shapes the training
    /// trajectory. Checkpoints store it; resume refuses a mismatch.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.resolved() {
            // The output directory and data location do not affect the
            // trajectory; everything else does.
            if k == "data_dir" {
                continue;
            }
            text.push_str(&k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Parses a flat `key = value` file. `#` starts a comment; blank lines are
/// skipped.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut kv = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                lineno + 1
            ))
        })?;
        kv.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(kv)
}

/// Parses one `key=value` override argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override '{arg}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_preset_defaults() {
        let cfg = RunConfig::preset(DatasetKind::Shapes);
        assert_eq!(cfg.latent, LatentSpec::shapes());
        assert_eq!(cfg.image, (16, 16, 1));
        assert_eq!(cfg.iters, 3000);
        assert_eq!(cfg.ramp_iters, 1000);
        assert_eq!(cfg.labeled_count, 90);
        cfg.validate().unwrap();
    }

    #[test]
    fn mnist_preset_echoes_training_hyperparameters() {
        let cfg = RunConfig::preset(DatasetKind::Mnist);
        assert_eq!(cfg.weights.sup, 10.0);
        assert_eq!(cfg.opt.lr_d, 1e-4);
        assert_eq!(cfg.opt.lr_ge, 3e-4);
        assert_eq!(cfg.opt.beta1, 0.5);
        assert_eq!(cfg.opt.batch_size, 64);
        assert_eq!(cfg.iters, 50_000);
        assert_eq!(cfg.ramp_iters, 1000);
        cfg.validate().unwrap();
    }

    #[test]
    fn file_and_overrides_merge_in_order() {
        let dir = std::env::temp_dir().join("factorgen-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# comment\ndataset = shapes\niters = 500\nlabeled_count = 30\n",
        )
        .unwrap();
        let overrides = vec![("iters".to_string(), "750".to_string())];
        let cfg = RunConfig::from_sources(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.dataset, DatasetKind::Shapes);
        assert_eq!(cfg.iters, 750);
        assert_eq!(cfg.labeled_count, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let overrides = vec![("learning_rate".to_string(), "0.1".to_string())];
        assert!(RunConfig::from_sources(None, &overrides).is_err());
    }

    #[test]
    fn fingerprint_tracks_trajectory_inputs_only() {
        let a = RunConfig::preset(DatasetKind::Shapes);
        let mut b = a.clone();
        b.data_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.seed = 99;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn latent_override_via_cat_dims_list() {
        let overrides = vec![
            ("dataset".to_string(), "svhn".to_string()),
            ("cat_dims".to_string(), "10, 5, 5, 5".to_string()),
        ];
        let cfg = RunConfig::from_sources(None, &overrides).unwrap();
        assert_eq!(cfg.latent.cat_dims, vec![10, 5, 5, 5]);
    }
}
