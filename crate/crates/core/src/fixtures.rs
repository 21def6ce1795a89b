//! Deterministic synthetic data: piecewise-smooth grayscale scenes for
//! training and evaluation, and small sparse-recovery problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::image::Image;
use crate::sampling::{sample, Measurement, SamplingOperator};

enum Shape2d {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape2d {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape2d::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Shape2d::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// One `size x size` scene: a smooth shaded background, a few flat or
/// shaded shapes, and an optional striped texture region. Values lie in [0, 1].
pub fn scene(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let base = rng.random_range(0.2..0.8);
    let gx = rng.random_range(-0.3..0.3);
    let gy = rng.random_range(-0.3..0.3);
    let bump_x = rng.random_range(0.0..s);
    let bump_y = rng.random_range(0.0..s);
    let bump_r = rng.random_range(0.2..0.6) * s;
    let bump_a = rng.random_range(-0.2..0.2);

    let n_shapes = rng.random_range(2..6);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let shape = if rng.random_bool(0.6) {
            Shape2d::Ellipse {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                rx: rng.random_range(0.08..0.35) * s,
                ry: rng.random_range(0.08..0.35) * s,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        } else {
            let x0 = rng.random_range(0.0..0.8) * s;
            let y0 = rng.random_range(0.0..0.8) * s;
            Shape2d::Rect {
                x0,
                y0,
                x1: x0 + rng.random_range(0.1..0.5) * s,
                y1: y0 + rng.random_range(0.1..0.5) * s,
            }
        };
        let level = rng.random_range(0.0..1.0);
        let shade = rng.random_range(-0.2..0.2);
        shapes.push((shape, level, shade));
    }

    let texture = rng.random_bool(0.5).then(|| {
        let freq = rng.random_range(0.15..0.6);
        let dir: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.05..0.15);
        let region = Shape2d::Ellipse {
            cx: rng.random_range(0.2..0.8) * s,
            cy: rng.random_range(0.2..0.8) * s,
            rx: rng.random_range(0.15..0.4) * s,
            ry: rng.random_range(0.15..0.4) * s,
            angle: 0.0,
        };
        (freq, dir, amp, region)
    });

    let noise = 0.01;
    let normal = StandardNormal;
    Image::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let d2 = ((xf - bump_x).powi(2) + (yf - bump_y).powi(2)) / (bump_r * bump_r);
        let mut v = base + gx * (xf / s - 0.5) + gy * (yf / s - 0.5) + bump_a * (-d2).exp();
        for (shape, level, shade) in &shapes {
            if shape.contains(xf, yf) {
                v = level + shade * (yf / s - 0.5);
            }
        }
        if let Some((freq, dir, amp, region)) = &texture {
            if region.contains(xf, yf) {
                v += amp * (freq * (xf * dir.cos() + yf * dir.sin())).sin();
            }
        }
        let n: f64 = normal.sample(&mut rng);
        (v + noise * n).clamp(0.0, 1.0)
    })
}

/// `count` scenes with seeds derived from `seed`.
pub fn corpus(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| scene(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

/// Sparse-recovery test problem on a single `block x block` image.
#[derive(Clone, Debug)]
pub struct SparseProblem {
    pub signal: Image,
    pub op: SamplingOperator,
    pub y: Measurement,
    /// Indices of the non-zero entries of `signal`.
    pub support: Vec<usize>,
}

/// `k`-sparse signal of length `block²` with entries of magnitude in
/// [0.5, 1.5], measured by `m` orthogonalized Gaussian rows.
pub fn sparse_problem(block: usize, m: usize, k: usize, seed: u64) -> Result<SparseProblem> {
    let n = block * block;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut support: Vec<usize> = idx[..k.min(n)].to_vec();
    support.sort_unstable();
    let mut x = vec![0.0; n];
    for &i in &support {
        let mag = rng.random_range(0.5..1.5);
        x[i] = if rng.random_bool(0.5) { mag } else { -mag };
    }
    let signal = Image::new(block, block, x)?;
    let op = SamplingOperator::orthogonalized_gaussian(m, n, seed ^ 0x5eed)?;
    let op = SamplingOperator::from_matrix(m, block, op.matrix().to_vec())?;
    let y = sample(&signal, &op)?;
    Ok(SparseProblem {
        signal,
        op,
        y,
        support,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        let a = scene(32, 7);
        assert_eq!(a, scene(32, 7));
        assert_ne!(a, scene(32, 8));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sparse_problem_layout() {
        let p = sparse_problem(8, 32, 8, 1).unwrap();
        assert_eq!(p.support.len(), 8);
        let nz: Vec<usize> = p
            .signal
            .data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nz, p.support);
        assert_eq!(p.y.y.len(), 32);
    }
}
