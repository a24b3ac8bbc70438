//! Matrix multiplication with deterministic row-chunk parallelism.
//!
//! Chunk boundaries are fixed (never derived from thread availability), so
//! repeated runs produce bitwise-identical results on any machine.

use super::Scalar;
use ndarray::parallel::prelude::*;
use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, Axis};

/// Rows per parallel chunk: a few chunks per core, but large enough that
/// the per-chunk packing of the shared right-hand side stays amortized.
/// Depends only on the row count, so results are machine-independent.
fn chunk_rows(m: usize) -> usize {
    (m.div_ceil(4)).clamp(32, 512)
}

/// `c = a · b`, overwriting `c`.
pub fn matmul_into<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>, c: &mut Array2<F>) {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions must agree");
    assert_eq!(c.nrows(), a.nrows());
    assert_eq!(c.ncols(), b.ncols());
    let chunk = chunk_rows(a.nrows());
    c.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut cc, aa)| {
            general_mat_mul(F::one(), &aa, &b, F::zero(), &mut cc);
        });
}

/// `a · b` into a fresh array.
pub fn matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    matmul_into(a, b, &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn matches_naive_product() {
        let m = 37;
        let k = 19;
        let n = 11;
        let a = Array2::from_shape_fn((m, k), |(i, j)| ((i * 7 + j * 3) % 13) as f64 - 6.0);
        let b = Array2::from_shape_fn((k, n), |(i, j)| ((i * 5 + j * 11) % 17) as f64 - 8.0);
        let c = matmul(a.view(), b.view());
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[[i, l]] * b[[l, j]];
                }
                assert!((c[[i, j]] - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn handles_transposed_views() {
        let a = Array2::from_shape_fn((8, 300), |(i, j)| (i as f32 + 1.0) * 0.01 - j as f32 * 1e-4);
        let g = Array2::from_shape_fn((8, 5), |(i, j)| (i as f32 - j as f32) * 0.1);
        // a^T · g, the dense-layer weight-gradient shape.
        let gw = matmul(a.t(), g.view());
        assert_eq!(gw.shape(), &[300, 5]);
        let mut acc = 0.0f32;
        for i in 0..8 {
            acc += a[[i, 0]] * g[[i, 0]];
        }
        assert!((gw[[0, 0]] - acc).abs() < 1e-5);
    }
}
