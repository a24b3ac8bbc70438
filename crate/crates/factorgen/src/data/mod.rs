//! Dataset ingestion and batch drawing under the labeled/unlabeled
//! mixing schedule.

pub mod idx;
pub mod shapes;

use crate::error::{Error, Result};
use crate::Rng;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in [0,1] plus per-sample attribute records. Attributes are
/// nullable per sample so partially labeled data is representable.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Vec<Vec<Option<u32>>>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn attr_blocks(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Class label of the first attribute block, when present.
    pub fn class_of(&self, idx: usize) -> Option<u32> {
        self.labels.get(idx).and_then(|l| l.first().copied().flatten())
    }
}

/// Indices of the labeled training subset plus per-class coverage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSubset {
    pub indices: Vec<usize>,
    pub class_counts: Vec<usize>,
}

/// Selects a class-balanced labeled subset: every class receives
/// `floor(count/K)` or `ceil(count/K)` samples (the first `count % K`
/// classes get the extra one). Deterministic given the RNG state.
pub fn select_labeled(dataset: &Dataset, count: usize, rng: &mut Rng) -> Result<LabeledSubset> {
    if count > dataset.len() {
        return Err(Error::invalid(format!(
            "labeled count {count} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let n_classes = 1 + dataset
        .labels
        .iter()
        .filter_map(|l| l.first().copied().flatten())
        .max()
        .ok_or_else(|| Error::invalid("dataset has no class labels to balance on"))?
        as usize;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, labels) in dataset.labels.iter().enumerate() {
        if let Some(Some(c)) = labels.first() {
            pools[*c as usize].push(i);
        }
    }
    let base = count / n_classes;
    let extra = count % n_classes;
    let mut indices = Vec::with_capacity(count);
    let mut class_counts = Vec::with_capacity(n_classes);
    for (k, pool) in pools.iter_mut().enumerate() {
        let quota = base + usize::from(k < extra);
        if pool.len() < quota {
            return Err(Error::invalid(format!(
                "class {k} has only {} labeled samples, need {quota}",
                pool.len()
            )));
        }
        let (chosen, _) = pool.partial_shuffle(rng, quota);
        let mut chosen: Vec<usize> = chosen.to_vec();
        chosen.sort_unstable();
        class_counts.push(chosen.len());
        indices.extend(chosen);
    }
    Ok(LabeledSubset {
        indices,
        class_counts,
    })
}

/// A training batch: images, per-block labels (-1 where absent), and the
/// supervision mask. Mask entries are true only for samples drawn through
/// the labeled path whose attribute is actually present.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Array4<f32>,
    pub labels: Array2<i64>,
    pub mask: Array2<bool>,
}

/// Draws `batch_size` samples: each independently comes from the labeled
/// subset with probability `p_labeled` (mask on), otherwise from the full
/// training set with the mask off.
pub fn draw_batch(
    dataset: &Dataset,
    subset: &LabeledSubset,
    p_labeled: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<LabeledBatch> {
    if !(0.0..=1.0).contains(&p_labeled) {
        return Err(Error::invalid(format!(
            "labeled probability {p_labeled} not in [0,1]"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot draw from an empty dataset"));
    }
    if p_labeled > 0.0 && subset.indices.is_empty() {
        return Err(Error::invalid("labeled subset is empty"));
    }
    let (h, w, c) = dataset.image_shape();
    let blocks = dataset.attr_blocks().max(1);
    let mut images = Array4::<f32>::zeros((batch_size, h, w, c));
    let mut labels = Array2::<i64>::from_elem((batch_size, blocks), -1);
    let mut mask = Array2::<bool>::from_elem((batch_size, blocks), false);
    for i in 0..batch_size {
        let labeled = rng.random::<f64>() < p_labeled;
        let idx = if labeled {
            subset.indices[rng.random_range(0..subset.indices.len())]
        } else {
            rng.random_range(0..dataset.len())
        };
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&dataset.images.index_axis(ndarray::Axis(0), idx));
        if labeled {
            for (b, attr) in dataset.labels[idx].iter().enumerate() {
                if let Some(v) = attr {
                    labels[[i, b]] = *v as i64;
                    mask[[i, b]] = true;
                }
            }
        }
    }
    Ok(LabeledBatch {
        images,
        labels,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_dataset(n_per_class: usize, n_classes: u32) -> Dataset {
        let n = n_per_class * n_classes as usize;
        let images = Array4::from_shape_fn((n, 4, 4, 1), |(i, _, _, _)| i as f32 / n as f32);
        let labels = (0..n)
            .map(|i| vec![Some(i as u32 % n_classes)])
            .collect();
        Dataset {
            images,
            labels,
            split: Split::Train,
        }
    }

    #[test]
    fn balanced_selection_quotas() {
        let ds = toy_dataset(50, 10);
        let mut rng = Rng::seed_from_u64(1);
        let subset = select_labeled(&ds, 100, &mut rng).unwrap();
        assert_eq!(subset.indices.len(), 100);
        assert!(subset.class_counts.iter().all(|&c| c == 10));
        let mut rng = Rng::seed_from_u64(2);
        let s20 = select_labeled(&ds, 20, &mut rng).unwrap();
        assert!(s20.class_counts.iter().all(|&c| c == 2));
        let mut rng = Rng::seed_from_u64(3);
        let s50 = select_labeled(&ds, 50, &mut rng).unwrap();
        assert!(s50.class_counts.iter().all(|&c| c == 5));
        // Non-divisible counts stay within one sample per class.
        let mut rng = Rng::seed_from_u64(4);
        let s47 = select_labeled(&ds, 47, &mut rng).unwrap();
        assert_eq!(s47.indices.len(), 47);
        assert!(s47.class_counts.iter().all(|&c| c == 4 || c == 5));
    }

    #[test]
    fn selection_is_reproducible_from_seed() {
        let ds = toy_dataset(30, 3);
        let a = select_labeled(&ds, 9, &mut Rng::seed_from_u64(7)).unwrap();
        let b = select_labeled(&ds, 9, &mut Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_fails_when_class_too_small() {
        let ds = toy_dataset(2, 3);
        let mut rng = Rng::seed_from_u64(1);
        assert!(select_labeled(&ds, 9, &mut rng).is_err());
    }

    #[test]
    fn draw_batch_mask_endpoints() {
        let ds = toy_dataset(20, 4);
        let mut rng = Rng::seed_from_u64(5);
        let subset = select_labeled(&ds, 8, &mut rng).unwrap();
        let all = draw_batch(&ds, &subset, 1.0, 32, &mut rng).unwrap();
        assert!(all.mask.iter().all(|&m| m));
        let none = draw_batch(&ds, &subset, 0.0, 32, &mut rng).unwrap();
        assert!(none.mask.iter().all(|&m| !m));
    }

    #[test]
    fn draw_batch_labeled_fraction_matches_probability() {
        let ds = toy_dataset(100, 4);
        let mut rng = Rng::seed_from_u64(11);
        let subset = select_labeled(&ds, 40, &mut rng).unwrap();
        let mut labeled = 0usize;
        let total = 10_000usize;
        let batch = draw_batch(&ds, &subset, 0.5, total, &mut rng).unwrap();
        for i in 0..total {
            if batch.mask[[i, 0]] {
                labeled += 1;
            }
        }
        let frac = labeled as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.02, "labeled fraction {frac}");
    }

    #[test]
    fn masked_entries_always_carry_valid_labels() {
        let ds = toy_dataset(25, 5);
        let mut rng = Rng::seed_from_u64(13);
        let subset = select_labeled(&ds, 25, &mut rng).unwrap();
        let batch = draw_batch(&ds, &subset, 0.7, 256, &mut rng).unwrap();
        for i in 0..256 {
            if batch.mask[[i, 0]] {
                let y = batch.labels[[i, 0]];
                assert!((0..5).contains(&y));
            } else {
                assert_eq!(batch.labels[[i, 0]], -1);
            }
        }
    }
}
