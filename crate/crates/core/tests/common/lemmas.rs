//! Oracles for the mixture closure properties and the Dirichlet KL, shared by
//! the gaussmix/svmgp tests and the acceptance suite. Each returns the
//! measured discrepancy so callers decide how to report it.

use super::*;
use mgp::rng;
use mgp::svmgp::kl_dirichlet;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

fn two_d_mixture() -> GaussianMixtureDist {
    GaussianMixtureDist::new(
        vec![0.35, 0.65],
        vec![
            GaussianDist::new(
                DVector::from_column_slice(&[-0.5, 1.0]),
                DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.8]),
            )
            .unwrap(),
            GaussianDist::new(
                DVector::from_column_slice(&[1.2, -0.7]),
                DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 1.5]),
            )
            .unwrap(),
        ],
    )
    .unwrap()
}

/// Largest |∫ p(x0, t) dt − p(x0)| over 5 points, trapezoid with 2001 nodes
/// over ±8 standard deviations of every component.
pub fn marginal_quadrature_error() -> f64 {
    let mix = two_d_mixture();
    let marg = mix.marginalize(&[0]).unwrap();
    let (lo, hi) = mix.components().iter().fold((f64::MAX, f64::MIN), |(lo, hi), c| {
        let sd = c.covariance()[(1, 1)].sqrt();
        (lo.min(c.mean()[1] - 8.0 * sd), hi.max(c.mean()[1] + 8.0 * sd))
    });
    let nodes = 2001;
    let h = (hi - lo) / (nodes - 1) as f64;
    [-2.0, -0.7, 0.0, 0.9, 2.5]
        .iter()
        .map(|&x0| {
            let mut integral = 0.0;
            for q in 0..nodes {
                let t = lo + q as f64 * h;
                let w = if q == 0 || q == nodes - 1 { 0.5 } else { 1.0 };
                integral += w * mix.logpdf(&DVector::from_column_slice(&[x0, t])).unwrap().exp();
            }
            integral *= h;
            let direct = marg.logpdf(&DVector::from_element(1, x0)).unwrap().exp();
            (integral - direct).abs()
        })
        .fold(0.0, f64::max)
}

/// Conditional weights against Bayes' rule worked out with scalar densities.
pub fn hand_bayes_error() -> f64 {
    let mix = two_d_mixture();
    let x1 = 0.4;
    let cond = mix.condition(&[1], &DVector::from_element(1, x1)).unwrap();
    let dens: Vec<f64> = mix
        .weights()
        .iter()
        .zip(mix.components())
        .map(|(w, c)| {
            let v = c.covariance()[(1, 1)];
            let r = x1 - c.mean()[1];
            w * (-0.5 * r * r / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
        })
        .collect();
    let total: f64 = dens.iter().sum();
    cond.weights()
        .iter()
        .zip(&dens)
        .map(|(a, d)| (a - d / total).abs())
        .fold(0.0, f64::max)
}

/// Monte-Carlo check of noise addition: the largest covariance-entry deviation
/// measured in standard errors, at 10^5 draws.
pub fn noise_addition_z_score() -> f64 {
    let mix = two_d_mixture();
    let noise: f64 = 0.3;
    let count = 100_000;
    let draws = mix.sample(count, 17);
    let mut r = rng::stream(17, 1234);
    let noisy = draws.map(|v| v + noise.sqrt() * r.sample::<f64, _>(StandardNormal));
    let (_, cov) = mix.add_diagonal_noise(noise).unwrap().moments();
    let means: Vec<f64> = (0..2).map(|j| noisy.column(j).mean()).collect();
    let mut worst: f64 = 0.0;
    for a in 0..2 {
        for b in a..2 {
            let prods: Vec<f64> = (0..count)
                .map(|s| (noisy[(s, a)] - means[a]) * (noisy[(s, b)] - means[b]))
                .collect();
            let (m, se) = mean_and_se(&prods);
            worst = worst.max((m - cov[(a, b)]).abs() / se);
        }
    }
    worst
}

fn sample_dirichlet(alpha: &[f64], r: &mut impl Rng) -> Vec<f64> {
    let g: Vec<f64> = alpha
        .iter()
        .map(|a| Gamma::new(*a, 1.0).unwrap().sample(r))
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

fn dirichlet_logpdf(alpha: &[f64], p: &[f64]) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let a0: f64 = alpha.iter().sum();
    ln_gamma(a0) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
        + alpha.iter().zip(p).map(|(a, x)| (a - 1.0) * x.ln()).sum::<f64>()
}

/// (closed form, Monte-Carlo mean, Monte-Carlo standard error) for KL(Dir(q) || Dir(p)).
pub fn dirichlet_kl_monte_carlo(q: &[f64], p: &[f64], count: usize, seed: u64) -> (f64, f64, f64) {
    let mut r = rng::stream(seed, 4321);
    let vals: Vec<f64> = (0..count)
        .map(|_| {
            let x = sample_dirichlet(q, &mut r);
            dirichlet_logpdf(q, &x) - dirichlet_logpdf(p, &x)
        })
        .collect();
    let (m, se) = mean_and_se(&vals);
    (kl_dirichlet(q, p).unwrap(), m, se)
}
