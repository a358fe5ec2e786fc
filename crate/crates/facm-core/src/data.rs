//! Analytic 2D target distributions.
//!
//! Every dataset is normalized to zero mean and unit per-axis variance using
//! closed-form moments of the generating process — no empirical statistics
//! are baked in, so normalization is exact at any sample count and the tests
//! can check the empirical moments against 0/1 directly.
//!
//! * `eight_gaussians` — equal-weight ring of 8 isotropic Gaussians; the
//!   mode index is the class label, making this the conditional benchmark.
//! * `two_moons` — two interleaved half circles with Gaussian jitter.
//! * `checkerboard` — uniform mass on the 8 black cells of a 4x4 board.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ring radius and per-mode standard deviation of the eight-Gaussian mixture
/// before normalization.
const RING_RADIUS: f64 = 2.0;
const RING_STD: f64 = 0.15;

/// Jitter applied to both moons before normalization.
const MOON_STD: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    EightGaussians,
    TwoMoons,
    Checkerboard,
}

pub const DATASET_NAMES: &str = "eight_gaussians, two_moons, checkerboard";

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "eight_gaussians" => Ok(DatasetKind::EightGaussians),
            "two_moons" => Ok(DatasetKind::TwoMoons),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            _ => Err(Error::UnknownDataset { name: name.to_string(), valid: DATASET_NAMES }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::EightGaussians => "eight_gaussians",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Checkerboard => "checkerboard",
        }
    }

    /// Number of class labels; 0 means the dataset is unconditional.
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetKind::EightGaussians => 8,
            _ => 0,
        }
    }

    /// Center of mode `k` after normalization (conditional datasets only).
    pub fn mode_center(&self, k: usize) -> [f64; 2] {
        assert_eq!(*self, DatasetKind::EightGaussians, "mode centers only exist for the ring");
        assert!(k < 8);
        let angle = std::f64::consts::TAU * k as f64 / 8.0;
        let s = (RING_RADIUS * RING_RADIUS / 2.0 + RING_STD * RING_STD).sqrt();
        [RING_RADIUS * angle.cos() / s, RING_RADIUS * angle.sin() / s]
    }
}

/// Draw one normalized point with its label.
pub fn sample_point(kind: DatasetKind, rng: &mut ChaCha8Rng) -> ([f64; 2], Option<usize>) {
    match kind {
        DatasetKind::EightGaussians => {
            let k = rng.random_range(0..8usize);
            let angle = std::f64::consts::TAU * k as f64 / 8.0;
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let x = RING_RADIUS * angle.cos() + RING_STD * nx;
            let y = RING_RADIUS * angle.sin() + RING_STD * ny;
            // Per-axis second moment of the mixture: mean of cos^2 over the 8
            // equally spaced angles is exactly 1/2, so E[x^2] = R^2/2 + s^2.
            let s = (RING_RADIUS * RING_RADIUS / 2.0 + RING_STD * RING_STD).sqrt();
            ([x / s, y / s], Some(k))
        }
        DatasetKind::TwoMoons => {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let upper = rng.random_range(0..2u8) == 0;
            let (mut x, mut y) = if upper {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            x += MOON_STD * nx;
            y += MOON_STD * ny;
            // Closed-form moments of the noiseless construction:
            //   E[x] = 1/2,               E[x^2] = 1            (E[cos] = 0 on [0, pi])
            //   E[y] = 1/4,               E[y^2] = 5/8 - 1/pi
            let var_x = 0.75 + MOON_STD * MOON_STD;
            let var_y = 0.5625 - 1.0 / std::f64::consts::PI + MOON_STD * MOON_STD;
            ([(x - 0.5) / var_x.sqrt(), (y - 0.25) / var_y.sqrt()], None)
        }
        DatasetKind::Checkerboard => {
            // 8 black cells of a 4x4 board on [-2, 2]^2: cell (i, j) is black
            // when i + j is even. Each column holds 2 of the 8 cells, so both
            // marginals are exactly uniform on [-2, 2] and Var = 4/3.
            let cell = rng.random_range(0..8usize);
            let i = cell / 2;
            let j = 2 * (cell % 2) + (i % 2);
            let x = -2.0 + i as f64 + rng.random_range(0.0..1.0);
            let y = -2.0 + j as f64 + rng.random_range(0.0..1.0);
            let s = (4.0f64 / 3.0).sqrt();
            ([x / s, y / s], None)
        }
    }
}

/// Draw `n` normalized points with labels.
pub fn make_dataset(kind: DatasetKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<([f64; 2], Option<usize>)> {
    (0..n).map(|_| sample_point(kind, rng)).collect()
}

/// Draw `n` points as an (n, 2) tensor plus labels — the batch form used by
/// training and evaluation.
pub fn draw_batch(kind: DatasetKind, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<Option<usize>>) {
    let mut buf = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, l) = sample_point(kind, rng);
        buf.extend_from_slice(&p);
        labels.push(l);
    }
    (Tensor::new(vec![n, 2], buf), labels)
}

/// CSV rows of a point cloud with the `x,y,label` header. Unconditional
/// points are written with label 0.
pub fn points_csv(points: &Tensor, labels: &[Option<usize>]) -> String {
    let (n, d) = points.dims2();
    assert_eq!(d, 2);
    assert_eq!(n, labels.len(), "label count does not match point count");
    let mut out = String::from("x,y,label\n");
    for i in 0..n {
        let r = points.row(i);
        out.push_str(&format!("{},{},{}\n", r[0], r[1], labels[i].unwrap_or(0)));
    }
    out
}
