#![allow(dead_code)]

pub mod instances;
pub mod lemmas;

use mgp::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Central finite difference of `f` at `p` along every coordinate.
pub fn central_diff(p: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + h;
            let up = f(&q);
            q[i] = p[i] - h;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// |a − b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> (f64, usize) {
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y, floor))
        .enumerate()
        .fold((0.0, 0), |(m, mi), (i, e)| if e > m { (e, i) } else { (m, mi) })
}

pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, 99);
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(lo..hi))
}

pub fn normal_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut r = rng::stream(seed, 98);
    DVector::from_fn(n, |_, _| r.sample(StandardNormal))
}

/// Random SPD matrix A Aᵀ + n·0.1·I.
pub fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let a = uniform_matrix(n, n, -1.0, 1.0, seed);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1 * n as f64
}

pub fn assert_matrix_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let diff = (a - b).amax();
    assert!(diff <= tol, "{what}: max abs difference {diff:e} > {tol:e}");
}

use mgp::{GaussianDist, GaussianMixtureDist};

/// Random k-component mixture in n dimensions with well-conditioned covariances.
pub fn random_mixture(n: usize, k: usize, seed: u64) -> GaussianMixtureDist {
    let raw = uniform_matrix(k, 1, 0.2, 1.0, seed ^ 0x5eed);
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let comps = (0..k)
        .map(|i| {
            let s = seed.wrapping_mul(31).wrapping_add(i as u64);
            let mean = uniform_matrix(n, 1, -1.5, 1.5, s).column(0).into_owned();
            let cov = random_spd(n, s ^ 0xc0ffee) / n as f64;
            GaussianDist::new(mean, cov).unwrap()
        })
        .collect();
    GaussianMixtureDist::new(weights, comps).unwrap()
}

/// Gaussian log density from the explicit inverse and determinant.
pub fn explicit_mvn_logpdf(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = mean.len() as f64;
    let inv = cov.clone().try_inverse().unwrap();
    let r = x - mean;
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
}

/// Sample mean and standard error of `values`.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
