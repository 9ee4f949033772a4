//! Multivariate Gaussians and finite Gaussian mixtures.
//!
//! Mixtures are closed under marginalization, conditioning and the addition of
//! independent isotropic Gaussian noise; each of those maps a mixture to a
//! mixture with the same number of components. All density ratios are computed
//! in log space.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::linalg::{self, Chol};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A multivariate normal with its cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Chol,
}

impl GaussianDist {
    /// Validates symmetry (to 1e-12, relative to the largest entry) and factorizes.
    pub fn new(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(MgpError::invalid("gaussian needs dimension >= 1"));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(MgpError::dims("gaussian covariance", n, cov.nrows().max(cov.ncols())));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(MgpError::NonFinite("gaussian mean".into()));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(MgpError::invalid(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        linalg::symmetrize(&mut cov);
        let chol = linalg::cholesky(cov.clone(), "gaussian covariance")?;
        Ok(GaussianDist { mean, cov, chol })
    }

    pub fn standard(n: usize) -> Self {
        GaussianDist::new(DVector::zeros(n), DMatrix::identity(n, n)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular factor L with LLᵀ = covariance.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        linalg::log_det(&self.chol)
    }

    /// Log density via the cached factor.
    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(MgpError::dims("gaussian logpdf point", self.dim(), x.len()));
        }
        let z = linalg::solve_lower_vec(&self.chol, &(x - &self.mean));
        Ok(-0.5 * z.norm_squared() - 0.5 * self.log_det() - 0.5 * self.dim() as f64 * LN_2PI)
    }

    fn restrict(&self, idx: &[usize]) -> Result<GaussianDist> {
        let mean = DVector::from_fn(idx.len(), |i, _| self.mean[idx[i]]);
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.cov[(idx[i], idx[j])]);
        GaussianDist::new(mean, cov)
    }
}

/// Finite mixture of equal-dimension Gaussians with simplex weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MixtureSnapshot", into = "MixtureSnapshot")]
pub struct GaussianMixtureDist {
    weights: Vec<f64>,
    components: Vec<GaussianDist>,
}

/// Plain nested-array form of a mixture, used for fixtures and model files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureSnapshot {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureSnapshot> for GaussianMixtureDist {
    type Error = MgpError;

    fn try_from(s: MixtureSnapshot) -> Result<Self> {
        if s.means.len() != s.weights.len() || s.covariances.len() != s.weights.len() {
            return Err(MgpError::invalid("snapshot component counts disagree"));
        }
        let comps = s
            .means
            .iter()
            .zip(&s.covariances)
            .map(|(m, c)| {
                let n = m.len();
                if c.len() != n || c.iter().any(|r| r.len() != n) {
                    return Err(MgpError::invalid("snapshot covariance shape"));
                }
                GaussianDist::new(
                    DVector::from_column_slice(m),
                    DMatrix::from_fn(n, n, |i, j| c[i][j]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixtureDist::new(s.weights, comps)
    }
}

impl From<GaussianMixtureDist> for MixtureSnapshot {
    fn from(m: GaussianMixtureDist) -> Self {
        MixtureSnapshot {
            weights: m.weights.clone(),
            means: m.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            covariances: m
                .components
                .iter()
                .map(|c| {
                    (0..c.dim())
                        .map(|i| (0..c.dim()).map(|j| c.cov[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl GaussianMixtureDist {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianDist>) -> Result<Self> {
        if components.is_empty() {
            return Err(MgpError::invalid("mixture needs at least one component"));
        }
        if weights.len() != components.len() {
            return Err(MgpError::dims("mixture weights", components.len(), weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MgpError::invalid(format!("mixture weights must be nonnegative: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(MgpError::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let n = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != n) {
            return Err(MgpError::dims("mixture component", n, c.dim()));
        }
        Ok(GaussianMixtureDist {
            weights,
            components,
        })
    }

    pub fn single(dist: GaussianDist) -> Self {
        GaussianMixtureDist {
            weights: vec![1.0],
            components: vec![dist],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianDist] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// log Σ_i π_i N(x | μ_i, Σ_i), via log-sum-exp.
    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        let terms = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| Ok(w.ln() + c.logpdf(x)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(linalg::log_sum_exp(&terms))
    }

    fn check_indices(&self, idx: &[usize], what: &str) -> Result<()> {
        if idx.is_empty() {
            return Err(MgpError::invalid(format!("{what} index set is empty")));
        }
        let n = self.dim();
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(MgpError::invalid(format!("{what} index {i} out of range 0..{n}")));
            }
            if seen[i] {
                return Err(MgpError::invalid(format!("{what} index {i} repeated")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Marginal over the coordinates in `keep` (in the given order). Weights are unchanged.
    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        self.check_indices(keep, "marginalize")?;
        let comps = self
            .components
            .iter()
            .map(|c| c.restrict(keep))
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianMixtureDist {
            weights: self.weights.clone(),
            components: comps,
        })
    }

    /// Distribution of the remaining coordinates (ascending order) given
    /// `values` at the `observed` coordinates.
    pub fn condition(&self, observed: &[usize], values: &DVector<f64>) -> Result<Self> {
        self.check_indices(observed, "condition")?;
        if observed.len() >= self.dim() {
            return Err(MgpError::invalid("observed set must be a strict subset of the coordinates"));
        }
        if values.len() != observed.len() {
            return Err(MgpError::dims("conditioning values", observed.len(), values.len()));
        }
        let free: Vec<usize> = (0..self.dim()).filter(|i| !observed.contains(i)).collect();
        let mut log_w = Vec::with_capacity(self.num_components());
        let mut comps = Vec::with_capacity(self.num_components());
        for (i, (w, c)) in self.weights.iter().zip(&self.components).enumerate() {
            let cov_b = DMatrix::from_fn(observed.len(), observed.len(), |p, q| {
                c.cov[(observed[p], observed[q])]
            });
            let chol_b = linalg::cholesky(cov_b, &format!("observed block of component {i}"))?;
            let cov_ba =
                DMatrix::from_fn(observed.len(), free.len(), |p, q| c.cov[(observed[p], free[q])]);
            let resid = DVector::from_fn(observed.len(), |p, _| values[p] - c.mean[observed[p]]);
            let z = linalg::solve_lower_vec(&chol_b, &resid);
            let v = linalg::solve_lower(&chol_b, &cov_ba);
            log_w.push(
                w.ln() - 0.5 * z.norm_squared() - 0.5 * linalg::log_det(&chol_b)
                    - 0.5 * observed.len() as f64 * LN_2PI,
            );
            let mean = DVector::from_fn(free.len(), |p, _| c.mean[free[p]]) + v.tr_mul(&z);
            let cov = DMatrix::from_fn(free.len(), free.len(), |p, q| c.cov[(free[p], free[q])])
                - v.tr_mul(&v);
            let mut cov = cov;
            linalg::symmetrize(&mut cov);
            comps.push(GaussianDist::new(mean, cov).map_err(|e| e.context(&format!("component {i}")))?);
        }
        let weights = normalize_log_weights(&log_w)?;
        Ok(GaussianMixtureDist {
            weights,
            components: comps,
        })
    }

    /// Distribution of X + Y with Y ~ N(0, σ²I) independent of X.
    pub fn add_diagonal_noise(&self, variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(MgpError::invalid(format!("noise variance must be >= 0, got {variance}")));
        }
        if variance == 0.0 {
            return Ok(self.clone());
        }
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mut cov = c.cov.clone();
                for j in 0..c.dim() {
                    cov[(j, j)] += variance;
                }
                GaussianDist::new(c.mean.clone(), cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianMixtureDist {
            weights: self.weights.clone(),
            components: comps,
        })
    }

    /// `count` draws as rows; deterministic given `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::stream(seed, rng::STREAM_SAMPLE);
        let n = self.dim();
        let factors: Vec<DMatrix<f64>> = self.components.iter().map(|c| c.chol.l()).collect();
        let mut out = DMatrix::zeros(count, n);
        let mut z = DVector::zeros(n);
        for r in 0..count {
            let u: f64 = rng.random();
            let i = pick(&self.weights, u);
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let draw = &self.components[i].mean + &factors[i] * &z;
            out.row_mut(r).copy_from(&draw.transpose());
        }
        out
    }

    /// Exact mixture mean and covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for (w, c) in self.weights.iter().zip(&self.components) {
            mean += *w * &c.mean;
            second += *w * (&c.cov + &c.mean * c.mean.transpose());
        }
        let cov = second - &mean * mean.transpose();
        (mean, cov)
    }

    /// Mixture mean and variance of coordinate `j` alone.
    pub fn marginal_moments(&self, j: usize) -> (f64, f64) {
        let mut m = 0.0;
        let mut s = 0.0;
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += w * c.mean[j];
            s += w * (c.cov[(j, j)] + c.mean[j] * c.mean[j]);
        }
        (m, s - m * m)
    }

    /// Log density of the one-dimensional marginal of coordinate `j` at `y`.
    pub fn marginal_logpdf(&self, j: usize, y: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| {
                let v = c.cov[(j, j)];
                let r = y - c.mean[j];
                w.ln() - 0.5 * (LN_2PI + v.ln() + r * r / v)
            })
            .collect();
        linalg::log_sum_exp(&terms)
    }
}

/// exp-normalizes log weights; fails when every entry is -inf or any is NaN.
pub(crate) fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.iter().any(|v| v.is_nan()) {
        return Err(MgpError::NonFinite(format!("log weights {log_w:?}")));
    }
    let lse = linalg::log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(MgpError::degenerate(
            "every component assigns zero density to the observation",
        ));
    }
    // exp(-745) is the smallest subnormal; anything below is an exact zero.
    let mut w: Vec<f64> = log_w
        .iter()
        .map(|lw| {
            let r = lw - lse;
            if r < -745.0 {
                0.0
            } else {
                r.exp()
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    Ok(w)
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Density of N(x | mean, var) in one dimension, for quick scalar checks.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}
