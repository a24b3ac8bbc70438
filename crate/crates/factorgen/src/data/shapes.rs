//! Procedural shapes dataset: one square, circle, or triangle per image,
//! with randomized scale and rotation. Small enough to train at desk scale
//! while keeping exact ground-truth generating factors.

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::Rng;
use ndarray::Array4;
use rand::Rng as _;
use std::f64::consts::PI;

pub const N_CLASSES: u32 = 3;

/// Ground-truth factors behind one rendered image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeFactors {
    /// 0 = square, 1 = circle, 2 = triangle.
    pub class: u32,
    /// Bounding-circle diameter in pixels.
    pub scale: f64,
    /// Rotation in radians.
    pub rotation: f64,
}

const SUPERSAMPLE: usize = 4;

fn inside(class: u32, x: f64, y: f64, radius: f64, rotation: f64) -> bool {
    match class {
        // Square inscribed in the bounding circle, rotated by `rotation`.
        0 => {
            let (sin, cos) = rotation.sin_cos();
            let rx = x * cos + y * sin;
            let ry = -x * sin + y * cos;
            let half = radius / 2f64.sqrt();
            rx.abs() <= half && ry.abs() <= half
        }
        1 => x * x + y * y <= radius * radius,
        // Equilateral triangle inscribed in the bounding circle.
        2 => {
            let mut verts = [(0.0f64, 0.0f64); 3];
            for (i, v) in verts.iter_mut().enumerate() {
                let a = rotation + PI / 2.0 + i as f64 * 2.0 * PI / 3.0;
                *v = (radius * a.cos(), radius * a.sin());
            }
            let sign = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| -> f64 {
                (bx - ax) * (y - ay) - (by - ay) * (x - ax)
            };
            let d0 = sign(verts[0], verts[1]);
            let d1 = sign(verts[1], verts[2]);
            let d2 = sign(verts[2], verts[0]);
            let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
            let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
            !(has_neg && has_pos)
        }
        _ => unreachable!("class index out of range"),
    }
}

/// Renders one shape into a `size x size` byte raster with 4x4
/// supersampled coverage per pixel.
fn render(size: usize, f: &ShapeFactors) -> Vec<u8> {
    let center = size as f64 / 2.0;
    let radius = f.scale / 2.0;
    let mut pixels = Vec::with_capacity(size * size);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0u32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step - center;
                    let y = py as f64 + (sy as f64 + 0.5) * step - center;
                    if inside(f.class, x, y, radius, f.rotation) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            pixels.push((cov * 255.0).round() as u8);
        }
    }
    pixels
}

/// Generates `n` images of side `size`. Classes are drawn uniformly, scale
/// uniformly in [0.4, 0.9] of the image side, rotation uniformly in
/// [0, 2pi). Returns the dataset and the true factors per sample.
pub fn make_shapes(
    n: usize,
    size: usize,
    split: Split,
    rng: &mut Rng,
) -> Result<(Dataset, Vec<ShapeFactors>)> {
    if size < 12 {
        return Err(Error::invalid(format!(
            "shape images need size >= 12, got {size}"
        )));
    }
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..N_CLASSES);
        let scale = (0.4 + 0.5 * rng.random::<f64>()) * size as f64;
        let rotation = rng.random::<f64>() * 2.0 * PI;
        let f = ShapeFactors {
            class,
            scale,
            rotation,
        };
        pixels.extend(render(size, &f).iter().map(|&b| b as f32 / 255.0));
        labels.push(vec![Some(class)]);
        factors.push(f);
    }
    let images = Array4::from_shape_vec((n, size, size, 1), pixels).expect("sized above");
    Ok((
        Dataset {
            images,
            labels,
            split,
        },
        factors,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn class_counts_are_roughly_uniform() {
        let mut rng = Rng::seed_from_u64(21);
        let (ds, _) = make_shapes(10_000, 16, Split::Train, &mut rng).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..ds.len() {
            counts[ds.class_of(i).unwrap() as usize] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 1.0 / 3.0).abs() <= 0.02, "class fraction {frac}");
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let (a, fa) = make_shapes(64, 16, Split::Train, &mut Rng::seed_from_u64(9)).unwrap();
        let (b, fb) = make_shapes(64, 16, Split::Train, &mut Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(fa, fb);
    }

    #[test]
    fn size_below_minimum_is_rejected() {
        let mut rng = Rng::seed_from_u64(1);
        assert!(make_shapes(4, 11, Split::Train, &mut rng).is_err());
    }

    #[test]
    fn images_have_foreground_and_background() {
        let mut rng = Rng::seed_from_u64(33);
        let (ds, factors) = make_shapes(30, 16, Split::Train, &mut rng).unwrap();
        for i in 0..ds.len() {
            let img = ds.images.index_axis(ndarray::Axis(0), i);
            let on = img.iter().filter(|&&v| v > 0.5).count();
            assert!(on > 4, "shape {i} ({:?}) nearly empty", factors[i]);
            assert!(on < 16 * 16 - 4, "shape {i} fills the frame");
        }
    }

    #[test]
    fn exactly_three_class_values() {
        let mut rng = Rng::seed_from_u64(5);
        let (ds, _) = make_shapes(500, 16, Split::Train, &mut rng).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..ds.len() {
            seen.insert(ds.class_of(i).unwrap());
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
