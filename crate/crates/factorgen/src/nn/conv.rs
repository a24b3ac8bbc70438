//! 2-D convolution primitives over NHWC tensors.
//!
//! All three maps (forward, input gradient, weight gradient) reduce to an
//! im2col gather plus one matrix product. Padding is "same"-style: stride 1
//! preserves the spatial size, stride 2 halves it (rounding up), and the
//! transposed direction exactly doubles it.
//!
//! The input gradient is computed per output phase (one sub-problem per
//! stride offset), which skips the zero rows a dilation-based formulation
//! would multiply through.

use super::Scalar;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis};

/// Output length of a same-padded convolution: `ceil(len / stride)`.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// (before, after) zero padding so that the output length is `ceil(len/s)`.
pub fn same_pad(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = conv_out_len(len, stride);
    let total = ((out - 1) * stride + k).saturating_sub(len);
    (total / 2, total - total / 2)
}

struct GatherSpec {
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pt: isize,
    pl: isize,
    ho: usize,
    wo: usize,
}

/// Copies one sample's kernel patches into `dst` (`ho*wo` rows of
/// `kh*kw*ci`). `dst` must be zeroed; reads outside the input stay zero.
fn gather_sample<F: Scalar>(xs: &[F], ni: usize, g: &GatherSpec, dst: &mut [F]) {
    let row_len = g.kh * g.kw * g.ci;
    for i in 0..g.ho {
        for di in 0..g.kh {
            let y = (i * g.stride + di) as isize - g.pt;
            if y < 0 || y >= g.h as isize {
                continue;
            }
            let y = y as usize;
            for j in 0..g.wo {
                let x_start = (j * g.stride) as isize - g.pl;
                let dj_lo = (-x_start).max(0) as usize;
                let dj_hi = (g.w as isize - x_start).clamp(0, g.kw as isize) as usize;
                if dj_lo >= dj_hi {
                    continue;
                }
                let src_col = (x_start + dj_lo as isize) as usize;
                let src_off = ((ni * g.h + y) * g.w + src_col) * g.ci;
                let len = (dj_hi - dj_lo) * g.ci;
                let dst_off = (i * g.wo + j) * row_len + (di * g.kw + dj_lo) * g.ci;
                dst[dst_off..dst_off + len].copy_from_slice(&xs[src_off..src_off + len]);
            }
        }
    }
}

/// Fused patch-gather and multiply: `im2col(x) . wmat` without
/// materializing the full patch matrix. Samples are processed in groups
/// whose scratch fits in cache; traffic stays proportional to the input
/// and output rather than to the patch matrix.
fn gather_matmul<F: Scalar>(
    x: ArrayView4<F>,
    k: (usize, usize),
    stride: usize,
    pad: (isize, isize),
    out_hw: (usize, usize),
    wmat: ndarray::ArrayView2<F>,
) -> Array2<F> {
    let (n, h, w, ci) = x.dim();
    let spec = GatherSpec {
        h,
        w,
        ci,
        kh: k.0,
        kw: k.1,
        stride,
        pt: pad.0,
        pl: pad.1,
        ho: out_hw.0,
        wo: out_hw.1,
    };
    let row_len = spec.kh * spec.kw * ci;
    let sample_rows = spec.ho * spec.wo;
    debug_assert_eq!(wmat.nrows(), row_len);
    // Scratch of roughly a megabyte per task; grouping depends only on
    // shapes, so results are machine-independent.
    let sample_bytes = sample_rows * row_len * std::mem::size_of::<F>();
    let group = (1_048_576 / sample_bytes.max(1)).clamp(1, n.max(1));
    let mut y = Array2::<F>::zeros((n * sample_rows, wmat.ncols()));
    let storage: Array4<F>;
    let xs: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            storage = x.to_owned();
            storage.as_slice().expect("owned arrays are contiguous")
        }
    };
    y.axis_chunks_iter_mut(Axis(0), group * sample_rows)
        .into_par_iter()
        .enumerate()
        .for_each(|(gi, mut yblock)| {
            let s0 = gi * group;
            let s1 = (s0 + group).min(n);
            let mut cols = Array2::<F>::zeros(((s1 - s0) * sample_rows, row_len));
            {
                let bs = cols.as_slice_mut().expect("owned array");
                for (local, ni) in (s0..s1).enumerate() {
                    let off = local * sample_rows * row_len;
                    gather_sample(xs, ni, &spec, &mut bs[off..off + sample_rows * row_len]);
                }
            }
            ndarray::linalg::general_mat_mul(F::one(), &cols, &wmat, F::zero(), &mut yblock);
        });
    y
}

fn reshape4<F: Scalar>(m: Array2<F>, dims: (usize, usize, usize, usize)) -> Array4<F> {
    let (v, _) = m.into_raw_vec_and_offset();
    Array4::from_shape_vec(dims, v).expect("row-major data matches target shape")
}

/// Forward convolution: `x [n,h,w,ci]` with `w [kh,kw,ci,co]`.
pub fn conv2d<F: Scalar>(
    x: &Array4<F>,
    w: &Array4<F>,
    bias: Option<&Array1<F>>,
    stride: usize,
) -> Array4<F> {
    let (n, h, wd, ci) = x.dim();
    let (kh, kw, wci, co) = w.dim();
    assert_eq!(ci, wci, "input channels must match kernel");
    let (pt, _) = same_pad(h, kh, stride);
    let (pl, _) = same_pad(wd, kw, stride);
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(wd, stride));
    let wmat = w
        .view()
        .into_shape_with_order((kh * kw * ci, co))
        .expect("kernel is contiguous");
    let mut ymat = gather_matmul(
        x.view(),
        (kh, kw),
        stride,
        (pt as isize, pl as isize),
        (ho, wo),
        wmat,
    );
    if let Some(b) = bias {
        ymat += b;
    }
    reshape4(ymat, (n, ho, wo, co))
}

/// Per-channel sums over batch and space; the bias gradient.
pub fn channel_sums<F: Scalar>(t: &Array4<F>) -> Array1<F> {
    let (n, h, w, c) = t.dim();
    let flat = t
        .view()
        .into_shape_with_order((n * h * w, c))
        .expect("standard layout");
    flat.sum_axis(Axis(0))
}

/// Gradient of `conv2d(x, w)` with respect to `w`, given the output
/// cotangent `gy`.
pub fn conv2d_grad_weights<F: Scalar>(
    x: &Array4<F>,
    gy: &Array4<F>,
    k: (usize, usize),
    stride: usize,
) -> Array4<F> {
    let (n, h, wd, ci) = x.dim();
    let (gn, ho, wo, co) = gy.dim();
    assert_eq!(n, gn, "batch sizes must match");
    assert_eq!(ho, conv_out_len(h, stride));
    assert_eq!(wo, conv_out_len(wd, stride));
    let (kh, kw) = k;
    let (pt, _) = same_pad(h, kh, stride);
    let (pl, _) = same_pad(wd, kw, stride);
    let spec = GatherSpec {
        h,
        w: wd,
        ci,
        kh,
        kw,
        stride,
        pt: pt as isize,
        pl: pl as isize,
        ho,
        wo,
    };
    let row_len = kh * kw * ci;
    let sample_rows = ho * wo;
    let gymat = gy
        .view()
        .into_shape_with_order((n * sample_rows, co))
        .expect("standard layout");
    let sample_bytes = sample_rows * row_len * std::mem::size_of::<F>();
    let group = (1_048_576 / sample_bytes.max(1)).clamp(1, n.max(1));
    let n_groups = n.div_ceil(group);
    let storage: Array4<F>;
    let xs: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            storage = x.to_owned();
            storage.as_slice().expect("owned arrays are contiguous")
        }
    };
    // Ordered per-group partial products; the final sum runs serially in
    // group order so the reduction is bitwise reproducible.
    let partials: Vec<Array2<F>> = (0..n_groups)
        .into_par_iter()
        .map(|gi| {
            let s0 = gi * group;
            let s1 = (s0 + group).min(n);
            let mut cols = Array2::<F>::zeros(((s1 - s0) * sample_rows, row_len));
            {
                let bs = cols.as_slice_mut().expect("owned array");
                for (local, ni) in (s0..s1).enumerate() {
                    let off = local * sample_rows * row_len;
                    gather_sample(xs, ni, &spec, &mut bs[off..off + sample_rows * row_len]);
                }
            }
            let gyblock = gymat.slice(s![s0 * sample_rows..s1 * sample_rows, ..]);
            let mut partial = Array2::<F>::zeros((row_len, co));
            ndarray::linalg::general_mat_mul(F::one(), &cols.t(), &gyblock, F::zero(), &mut partial);
            partial
        })
        .collect();
    let mut gwmat = Array2::<F>::zeros((row_len, co));
    for p in partials {
        gwmat += &p;
    }
    reshape4(gwmat, (kh, kw, ci, co))
}

/// Gradient of `conv2d(x, w)` with respect to `x` — equivalently, the
/// transposed convolution of `gy` by `w`, producing spatial size `in_hw`.
pub fn conv2d_grad_input<F: Scalar>(
    gy: &Array4<F>,
    w: &Array4<F>,
    stride: usize,
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, ho, wo, co) = gy.dim();
    let (kh, kw, ci, wco) = w.dim();
    assert_eq!(co, wco, "cotangent channels must match kernel");
    let (h, wd) = in_hw;
    assert_eq!(ho, conv_out_len(h, stride));
    assert_eq!(wo, conv_out_len(wd, stride));
    let (pt, _) = same_pad(h, kh, stride);
    let (pl, _) = same_pad(wd, kw, stride);
    let st = stride;
    let mut gx = Array4::<F>::zeros((n, h, wd, ci));
    for r in 0..st {
        for c in 0..st {
            // Kernel taps congruent to this phase.
            let km = if r < kh { (kh - r).div_ceil(st) } else { 0 };
            let kn = if c < kw { (kw - c).div_ceil(st) } else { 0 };
            if km == 0 || kn == 0 {
                continue;
            }
            // Input rows y with (y + pt - r) divisible by the stride.
            let y0 = (r as isize - pt as isize).rem_euclid(st as isize) as usize;
            let x0 = (c as isize - pl as isize).rem_euclid(st as isize) as usize;
            if y0 >= h || x0 >= wd {
                continue;
            }
            let ny = (h - 1 - y0) / st + 1;
            let nx = (wd - 1 - x0) / st + 1;
            let yy0 = ((y0 + pt) as isize - r as isize) as usize / st;
            let xx0 = ((x0 + pl) as isize - c as isize) as usize / st;
            // Phase output q reads gy rows (yy0 + q) - m for m in [0, km):
            // a stride-1 gather with a (possibly negative) top offset.
            let i_base = yy0 as isize - (km as isize - 1);
            let j_base = xx0 as isize - (kn as isize - 1);
            // Spatially flipped phase slice of the kernel, [km*kn*co, ci].
            let mut wmat = Array2::<F>::zeros((km * kn * co, ci));
            for m in 0..km {
                for nn in 0..kn {
                    let src_r = r + st * (km - 1 - m);
                    let src_c = c + st * (kn - 1 - nn);
                    let block = w.slice(s![src_r, src_c, .., ..]);
                    wmat.slice_mut(s![(m * kn + nn) * co..(m * kn + nn + 1) * co, ..])
                        .assign(&block.t());
                }
            }
            let part = gather_matmul(
                gy.view(),
                (km, kn),
                1,
                (-i_base, -j_base),
                (ny, nx),
                wmat.view(),
            );
            let part4 = reshape4(part, (n, ny, nx, ci));
            gx.slice_mut(s![.., y0..h;st, x0..wd;st, ..]).assign(&part4);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng as _, SeedableRng};

    fn randn4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = crate::Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dims, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct-loop reference convolution.
    fn naive_conv2d(x: &Array4<f64>, w: &Array4<f64>, stride: usize) -> Array4<f64> {
        let (n, h, wd, ci) = x.dim();
        let (kh, kw, _, co) = w.dim();
        let (pt, _) = same_pad(h, kh, stride);
        let (pl, _) = same_pad(wd, kw, stride);
        let (ho, wo) = (conv_out_len(h, stride), conv_out_len(wd, stride));
        let mut y = Array4::<f64>::zeros((n, ho, wo, co));
        for b in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for di in 0..kh {
                            for dj in 0..kw {
                                let yy = (i * stride + di) as isize - pt as isize;
                                let xx = (j * stride + dj) as isize - pl as isize;
                                if yy < 0 || yy >= h as isize || xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    acc += x[[b, yy as usize, xx as usize, c]] * w[[di, dj, c, o]];
                                }
                            }
                        }
                        y[[b, i, j, o]] = acc;
                    }
                }
            }
        }
        y
    }

    fn dot(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn same_padding_sizes() {
        assert_eq!(conv_out_len(28, 2), 14);
        assert_eq!(conv_out_len(7, 2), 4);
        assert_eq!(same_pad(28, 3, 2), (0, 1));
        assert_eq!(same_pad(16, 4, 2), (1, 1));
        assert_eq!(same_pad(8, 3, 1), (1, 1));
        assert_eq!(same_pad(8, 4, 1), (1, 2));
    }

    #[test]
    fn forward_matches_naive_reference() {
        for (idx, &(h, w, ci, co, k, s)) in [
            (5, 5, 1, 2, 3, 1),
            (6, 6, 3, 4, 3, 2),
            (7, 5, 2, 3, 4, 2),
            (4, 4, 2, 2, 1, 1),
            (5, 7, 2, 2, 4, 1),
            (9, 9, 1, 1, 3, 2),
        ]
        .iter()
        .enumerate()
        {
            let x = randn4((2, h, w, ci), 100 + idx as u64);
            let wt = randn4((k, k, ci, co), 200 + idx as u64);
            let got = conv2d(&x, &wt, None, s);
            let want = naive_conv2d(&x, &wt, s);
            let err = got
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "case {idx}: max err {err}");
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = randn4((1, 4, 4, 2), 1);
        let w = randn4((3, 3, 2, 3), 2);
        let b = ndarray::arr1(&[0.5, -1.0, 2.0]);
        let without = conv2d(&x, &w, None, 1);
        let with = conv2d(&x, &w, Some(&b), 1);
        for i in 0..4 {
            for j in 0..4 {
                for o in 0..3 {
                    let d = with[[0, i, j, o]] - without[[0, i, j, o]];
                    assert!((d - b[o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_input_satisfies_adjoint_identity() {
        // <conv(x), gy> == <x, grad_input(gy)> for random tensors.
        for (idx, &(h, w, ci, co, k, s)) in [
            (6, 6, 2, 3, 3, 1),
            (6, 6, 2, 3, 3, 2),
            (8, 8, 3, 2, 4, 2),
            (5, 5, 1, 2, 4, 1),
            (4, 6, 2, 2, 1, 2),
            (7, 7, 2, 2, 4, 2),
        ]
        .iter()
        .enumerate()
        {
            let x = randn4((2, h, w, ci), 300 + idx as u64);
            let wt = randn4((k, k, ci, co), 400 + idx as u64);
            let y = conv2d(&x, &wt, None, s);
            let gy = randn4(y.dim(), 500 + idx as u64);
            let gx = conv2d_grad_input(&gy, &wt, s, (h, w));
            let lhs = dot(&y, &gy);
            let rhs = dot(&x, &gx);
            assert!(
                (lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()),
                "case {idx}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn grad_weights_satisfies_adjoint_identity() {
        // <conv(x; w), gy> == <w, grad_weights(x, gy)> by linearity in w.
        for (idx, &(h, w, ci, co, k, s)) in [
            (6, 6, 2, 3, 3, 1),
            (8, 8, 3, 2, 4, 2),
            (5, 7, 2, 2, 3, 2),
            (4, 4, 2, 2, 1, 1),
        ]
        .iter()
        .enumerate()
        {
            let x = randn4((2, h, w, ci), 600 + idx as u64);
            let wt = randn4((k, k, ci, co), 700 + idx as u64);
            let y = conv2d(&x, &wt, None, s);
            let gy = randn4(y.dim(), 800 + idx as u64);
            let gw = conv2d_grad_weights(&x, &gy, (k, k), s);
            let lhs = dot(&y, &gy);
            let rhs = dot(&wt, &gw);
            assert!(
                (lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()),
                "case {idx}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn transposed_direction_doubles_spatial_size() {
        // Running grad_input as a forward map: 4x4 -> 8x8 with stride 2.
        let x = randn4((1, 4, 4, 8), 42);
        let w = randn4((4, 4, 3, 8), 43);
        let y = conv2d_grad_input(&x, &w, 2, (8, 8));
        assert_eq!(y.dim(), (1, 8, 8, 3));
    }
}
