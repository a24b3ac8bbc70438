//! Structured latent representation `Z = (u, c)`.
//!
//! `u` is an unstructured vector absorbing residual appearance, `c` is the
//! structured part made of categorical blocks (one-hot when sampled, soft when
//! produced by the encoder) and continuous factors. Editing `c` is what powers
//! controllable generation and image-to-image translation.

use crate::error::{Error, Result};
use crate::Rng;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Tolerance used when checking that a categorical block sums to one.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Layout of the latent code: unstructured width, categorical block
/// cardinalities, and continuous width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub u_dim: usize,
    pub cat_dims: Vec<usize>,
    pub cont_dim: usize,
}

impl LatentSpec {
    pub fn new(u_dim: usize, cat_dims: Vec<usize>, cont_dim: usize) -> Result<Self> {
        let spec = LatentSpec {
            u_dim,
            cat_dims,
            cont_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &k) in self.cat_dims.iter().enumerate() {
            if k < 2 {
                return Err(Error::invalid(format!(
                    "categorical block {i} has cardinality {k}; every block needs at least 2"
                )));
            }
        }
        Ok(())
    }

    /// 16 unstructured dims, one 10-way class block, two continuous factors.
    pub fn mnist() -> Self {
        LatentSpec {
            u_dim: 16,
            cat_dims: vec![10],
            cont_dim: 2,
        }
    }

    /// 128 unstructured dims, a 10-way class block plus three 5-way blocks,
    /// four continuous factors.
    pub fn svhn() -> Self {
        LatentSpec {
            u_dim: 128,
            cat_dims: vec![10, 5, 5, 5],
            cont_dim: 4,
        }
    }

    /// 128 unstructured dims, a 5-way hair-color block plus three binary
    /// attribute blocks, four continuous factors.
    pub fn celeba() -> Self {
        LatentSpec {
            u_dim: 128,
            cat_dims: vec![5, 2, 2, 2],
            cont_dim: 4,
        }
    }

    /// Small layout for the procedural shapes dataset: one 3-way class block.
    pub fn shapes() -> Self {
        LatentSpec {
            u_dim: 16,
            cat_dims: vec![3],
            cont_dim: 2,
        }
    }

    pub fn cat_total(&self) -> usize {
        self.cat_dims.iter().sum()
    }

    pub fn total_dim(&self) -> usize {
        self.u_dim + self.cat_total() + self.cont_dim
    }
}

/// One latent code. Categorical blocks are probability vectors: exact
/// one-hots when sampled, soft distributions when derived from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub u: Vec<f64>,
    pub cats: Vec<Vec<f64>>,
    pub cont: Vec<f64>,
}

impl LatentCode {
    pub fn spec_of(&self) -> LatentSpec {
        LatentSpec {
            u_dim: self.u.len(),
            cat_dims: self.cats.iter().map(Vec::len).collect(),
            cont_dim: self.cont.len(),
        }
    }

    pub fn matches(&self, spec: &LatentSpec) -> bool {
        self.u.len() == spec.u_dim
            && self.cats.len() == spec.cat_dims.len()
            && self
                .cats
                .iter()
                .zip(&spec.cat_dims)
                .all(|(b, &k)| b.len() == k)
            && self.cont.len() == spec.cont_dim
    }

    /// Checks the simplex invariant on every categorical block.
    pub fn validate(&self) -> Result<()> {
        for (i, block) in self.cats.iter().enumerate() {
            if block.iter().any(|&p| p < -SIMPLEX_TOL) {
                return Err(Error::invalid(format!(
                    "categorical block {i} has a negative entry"
                )));
            }
            let sum: f64 = block.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!(
                    "categorical block {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy with block `block_index` replaced by the one-hot of
    /// `category`; `u` and `cont` are untouched.
    pub fn with_category(&self, block_index: usize, category: usize) -> Result<LatentCode> {
        let block = self.cats.get(block_index).ok_or_else(|| {
            Error::invalid(format!(
                "block index {block_index} out of range ({} blocks)",
                self.cats.len()
            ))
        })?;
        if category >= block.len() {
            return Err(Error::invalid(format!(
                "category {category} out of range for block {block_index} (cardinality {})",
                block.len()
            )));
        }
        let mut out = self.clone();
        for (j, p) in out.cats[block_index].iter_mut().enumerate() {
            *p = if j == category { 1.0 } else { 0.0 };
        }
        Ok(out)
    }

    /// Flattens to the canonical wire layout: `u`, categorical blocks in
    /// order, `cont`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec_of().total_dim());
        out.extend_from_slice(&self.u);
        for block in &self.cats {
            out.extend_from_slice(block);
        }
        out.extend_from_slice(&self.cont);
        out
    }

    pub fn unflatten(spec: &LatentSpec, v: &[f64]) -> Result<LatentCode> {
        if v.len() != spec.total_dim() {
            return Err(Error::invalid(format!(
                "vector length {} does not match spec total dim {}",
                v.len(),
                spec.total_dim()
            )));
        }
        let mut pos = 0;
        let u = v[..spec.u_dim].to_vec();
        pos += spec.u_dim;
        let mut cats = Vec::with_capacity(spec.cat_dims.len());
        for &k in &spec.cat_dims {
            cats.push(v[pos..pos + k].to_vec());
            pos += k;
        }
        let cont = v[pos..pos + spec.cont_dim].to_vec();
        Ok(LatentCode { u, cats, cont })
    }
}

/// Draws a code from the prior: `u` and `cont` i.i.d. uniform on [-1, 1],
/// each categorical block uniform over its categories, returned one-hot.
pub fn sample_code(spec: &LatentSpec, rng: &mut Rng) -> LatentCode {
    let u: Vec<f64> = (0..spec.u_dim).map(|_| uniform_pm1(rng)).collect();
    let cats: Vec<Vec<f64>> = spec
        .cat_dims
        .iter()
        .map(|&k| {
            let hot = rng.random_range(0..k);
            (0..k).map(|j| if j == hot { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let cont: Vec<f64> = (0..spec.cont_dim).map(|_| uniform_pm1(rng)).collect();
    LatentCode { u, cats, cont }
}

fn uniform_pm1(rng: &mut Rng) -> f64 {
    rng.random::<f64>() * 2.0 - 1.0
}

/// Componentwise `(1-t)*a + t*b` across `u`, categorical blocks, and `cont`.
/// Categorical blocks stay simplex-valued because the result is a convex
/// combination.
pub fn interpolate(a: &LatentCode, b: &LatentCode, t: f64) -> Result<LatentCode> {
    if a.spec_of() != b.spec_of() {
        return Err(Error::invalid(
            "interpolation endpoints have mismatched latent layouts",
        ));
    }
    let lerp = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(&p, &q)| (1.0 - t) * p + t * q)
            .collect()
    };
    Ok(LatentCode {
        u: lerp(&a.u, &b.u),
        cats: a
            .cats
            .iter()
            .zip(&b.cats)
            .map(|(p, q)| lerp(p, q))
            .collect(),
        cont: lerp(&a.cont, &b.cont),
    })
}

/// A batch of codes in structured form, in the element type of the network
/// stack. Rows of `flat()` follow the canonical layout.
#[derive(Debug, Clone)]
pub struct CodeBatch<F> {
    pub u: Array2<F>,
    pub cats: Vec<Array2<F>>,
    pub cont: Array2<F>,
}

impl<F: crate::nn::Scalar> CodeBatch<F> {
    pub fn from_codes(spec: &LatentSpec, codes: &[LatentCode]) -> Result<CodeBatch<F>> {
        let n = codes.len();
        for code in codes {
            if !code.matches(spec) {
                return Err(Error::invalid("code does not match latent spec"));
            }
        }
        let cast = |x: f64| F::from_f64(x);
        let mut u = Array2::zeros((n, spec.u_dim));
        let mut cats: Vec<Array2<F>> = spec
            .cat_dims
            .iter()
            .map(|&k| Array2::zeros((n, k)))
            .collect();
        let mut cont = Array2::zeros((n, spec.cont_dim));
        for (i, code) in codes.iter().enumerate() {
            for (j, &x) in code.u.iter().enumerate() {
                u[[i, j]] = cast(x);
            }
            for (b, block) in code.cats.iter().enumerate() {
                for (j, &x) in block.iter().enumerate() {
                    cats[b][[i, j]] = cast(x);
                }
            }
            for (j, &x) in code.cont.iter().enumerate() {
                cont[[i, j]] = cast(x);
            }
        }
        Ok(CodeBatch { u, cats, cont })
    }

    pub fn sample(spec: &LatentSpec, n: usize, rng: &mut Rng) -> CodeBatch<F> {
        let codes: Vec<LatentCode> = (0..n).map(|_| sample_code(spec, rng)).collect();
        CodeBatch::from_codes(spec, &codes).expect("sampled codes always match their spec")
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates `u`, categorical blocks, and `cont` along axis 1.
    pub fn flat(&self) -> Array2<F> {
        let n = self.len();
        let total = self.u.ncols()
            + self.cats.iter().map(|c| c.ncols()).sum::<usize>()
            + self.cont.ncols();
        let mut out = Array2::zeros((n, total));
        let mut pos = 0;
        let mut copy = |src: &Array2<F>, pos: &mut usize| {
            let w = src.ncols();
            out.slice_mut(ndarray::s![.., *pos..*pos + w]).assign(src);
            *pos += w;
        };
        copy(&self.u, &mut pos);
        for block in &self.cats {
            copy(block, &mut pos);
        }
        copy(&self.cont, &mut pos);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn preset_dimensions() {
        assert_eq!(LatentSpec::mnist().total_dim(), 16 + 10 + 2);
        assert_eq!(LatentSpec::svhn().total_dim(), 128 + 10 + 5 + 5 + 5 + 4);
        assert_eq!(LatentSpec::celeba().total_dim(), 128 + 5 + 2 + 2 + 2 + 4);
    }

    #[test]
    fn bad_cardinality_rejected() {
        assert!(LatentSpec::new(4, vec![1], 0).is_err());
        assert!(LatentSpec::new(0, vec![2], 0).is_ok());
    }

    #[test]
    fn sampled_code_shape_and_ranges() {
        let spec = LatentSpec::mnist();
        let mut r = rng(1);
        for _ in 0..50 {
            let code = sample_code(&spec, &mut r);
            assert_eq!(code.flatten().len(), 28);
            assert!(code.u.iter().all(|&x| (-1.0..=1.0).contains(&x)));
            assert!(code.cont.iter().all(|&x| (-1.0..=1.0).contains(&x)));
            // Sampled blocks are exact one-hots.
            for block in &code.cats {
                let sum: f64 = block.iter().sum();
                assert_eq!(sum, 1.0);
                assert_eq!(block.iter().filter(|&&p| p == 1.0).count(), 1);
                assert!(block.iter().all(|&p| p == 0.0 || p == 1.0));
            }
            code.validate().unwrap();
        }
    }

    #[test]
    fn categorical_sampling_is_uniform() {
        // Monte-Carlo frequency oracle: a 2-way block should land on
        // category 0 about half the time.
        let spec = LatentSpec::new(0, vec![2], 0).unwrap();
        let mut r = rng(42);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_code(&spec, &mut r).cats[0][0] == 1.0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn set_category_semantics() {
        let spec = LatentSpec::mnist();
        let mut r = rng(7);
        let code = sample_code(&spec, &mut r);
        let set7 = code.with_category(0, 7).unwrap();
        assert_eq!(set7.u, code.u);
        assert_eq!(set7.cont, code.cont);
        let expected: Vec<f64> = (0..10).map(|j| if j == 7 { 1.0 } else { 0.0 }).collect();
        assert_eq!(set7.cats[0], expected);
        // Idempotent, and last write wins.
        assert_eq!(set7.with_category(0, 7).unwrap(), set7);
        let via35 = code
            .with_category(0, 3)
            .unwrap()
            .with_category(0, 5)
            .unwrap();
        assert_eq!(via35, code.with_category(0, 5).unwrap());
        assert!(code.with_category(1, 0).is_err());
        assert!(code.with_category(0, 10).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let spec = LatentSpec::mnist();
        let mut r = rng(3);
        let a = sample_code(&spec, &mut r).with_category(0, 4).unwrap();
        let b = sample_code(&spec, &mut r).with_category(0, 9).unwrap();
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&a, &b, 0.5).unwrap();
        assert_eq!(mid.cats[0][4], 0.5);
        assert_eq!(mid.cats[0][9], 0.5);
        mid.validate().unwrap();
    }

    #[test]
    fn interpolate_hand_case() {
        let a = LatentCode {
            u: vec![1.0, -1.0],
            cats: vec![vec![1.0, 0.0]],
            cont: vec![],
        };
        let b = LatentCode {
            u: vec![0.0, 0.0],
            cats: vec![vec![0.0, 1.0]],
            cont: vec![],
        };
        let c = interpolate(&a, &b, 0.25).unwrap();
        assert_eq!(c.u, vec![0.75, -0.75]);
    }

    #[test]
    fn interpolate_rejects_mismatched_specs() {
        let mut r = rng(5);
        let a = sample_code(&LatentSpec::mnist(), &mut r);
        let b = sample_code(&LatentSpec::svhn(), &mut r);
        assert!(interpolate(&a, &b, 0.5).is_err());
    }

    #[test]
    fn unflatten_errors_and_degenerate_input() {
        let spec = LatentSpec::mnist();
        assert!(LatentCode::unflatten(&spec, &[0.0; 27]).is_err());
        let zero = LatentCode::unflatten(&spec, &[0.0; 28]).unwrap();
        assert!(zero.u.iter().all(|&x| x == 0.0));
        // All-zero categorical block is not a simplex point.
        assert!(zero.validate().is_err());
    }

    #[test]
    fn code_batch_flat_layout() {
        let spec = LatentSpec::new(2, vec![3], 1).unwrap();
        let code = LatentCode {
            u: vec![0.5, -0.5],
            cats: vec![vec![0.0, 1.0, 0.0]],
            cont: vec![0.25],
        };
        let batch = CodeBatch::<f64>::from_codes(&spec, &[code.clone()]).unwrap();
        let flat = batch.flat();
        assert_eq!(flat.row(0).to_vec(), code.flatten());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_pair() -> impl Strategy<Value = (LatentCode, LatentCode, f64)> {
            let spec = LatentSpec::new(3, vec![4], 2).unwrap();
            (any::<u64>(), any::<u64>(), 0.0f64..=1.0).prop_map(move |(s1, s2, t)| {
                let mut r1 = crate::Rng::seed_from_u64(s1);
                let mut r2 = crate::Rng::seed_from_u64(s2);
                (sample_code(&spec, &mut r1), sample_code(&spec, &mut r2), t)
            })
        }

        proptest! {
            #[test]
            fn interpolation_is_linear((a, b, t) in arb_pair()) {
                // interpolate(a,b,t) + interpolate(a,b,1-t) == a + b componentwise.
                let lo = interpolate(&a, &b, t).unwrap().flatten();
                let hi = interpolate(&a, &b, 1.0 - t).unwrap().flatten();
                let sum: Vec<f64> = a.flatten().iter().zip(b.flatten()).map(|(x, y)| x + y).collect();
                for ((l, h), s) in lo.iter().zip(&hi).zip(&sum) {
                    prop_assert!((l + h - s).abs() <= 1e-12);
                }
            }

            #[test]
            fn flatten_unflatten_round_trip(seed in any::<u64>()) {
                let spec = LatentSpec::svhn();
                let mut r = crate::Rng::seed_from_u64(seed);
                let code = sample_code(&spec, &mut r);
                let back = LatentCode::unflatten(&spec, &code.flatten()).unwrap();
                prop_assert_eq!(back, code);
            }
        }
    }
}
