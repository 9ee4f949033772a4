//! Dense mixture-of-GP regression.
//!
//! The pooled prior is a weighted sum of GP priors sharing one Gaussian noise
//! variance. Conditioning on data keeps every component's usual GP posterior and
//! reweights the components by their marginal likelihoods. Mixture weights are
//! fixed ex ante; kernel, mean and noise hyperparameters are trained by
//! gradient ascent on the log marginal likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MgpError, Result};
use crate::gaussmix::{self, GaussianDist, GaussianMixtureDist};
use crate::kernels::{GramOptions, KernelSpec, MeanSpec, Points};
use crate::linalg::{self, Chol};
use crate::optim::Adam;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One prior belief in the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgpComponent {
    pub name: String,
    #[serde(default)]
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
    pub weight: f64,
}

/// Linear pool of GP priors with a shared observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorConfig", into = "PriorConfig")]
pub struct MgpPrior {
    components: Vec<MgpComponent>,
    noise: f64,
    gram: GramOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorConfig {
    pub components: Vec<MgpComponent>,
    pub noise_variance: f64,
    #[serde(default)]
    pub gram: GramOptions,
}

impl TryFrom<PriorConfig> for MgpPrior {
    type Error = MgpError;

    fn try_from(c: PriorConfig) -> Result<Self> {
        MgpPrior::new(c.components, c.noise_variance, c.gram)
    }
}

impl From<MgpPrior> for PriorConfig {
    fn from(p: MgpPrior) -> Self {
        PriorConfig {
            noise_variance: p.noise_variance(),
            components: p.components,
            gram: p.gram,
        }
    }
}

/// Rejects empty, misshapen or non-finite training data.
pub(crate) fn validate_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(MgpError::invalid("training data is empty"));
    }
    if x.nrows() != y.len() {
        return Err(MgpError::dims("training targets", x.nrows(), y.len()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(MgpError::invalid("training data contains non-finite values"));
    }
    Ok(())
}

impl MgpPrior {
    pub fn new(components: Vec<MgpComponent>, noise_variance: f64, gram: GramOptions) -> Result<Self> {
        if components.is_empty() {
            return Err(MgpError::invalid("a pooled prior needs at least one component"));
        }
        for c in &components {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(MgpError::invalid(format!(
                    "weight of component '{}' must lie in (0, 1], got {}",
                    c.name, c.weight
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(MgpError::invalid(format!("component weights sum to {total}, not 1")));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(MgpError::invalid(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        GramOptions::new(gram.jitter_scale)?;
        let prior = MgpPrior {
            components,
            noise: noise_variance,
            gram,
        };
        prior.input_dim_hint()?;
        Ok(prior)
    }

    /// Input dimension implied by the component specs, if any of them fixes it.
    fn input_dim_hint(&self) -> Result<Option<usize>> {
        let mut dim: Option<usize> = None;
        for c in &self.components {
            let dims = [
                c.kernel.input_dim(),
                match &c.mean {
                    MeanSpec::Linear { weights, .. } => Some(weights.len()),
                    _ => None,
                },
            ];
            for d in dims.into_iter().flatten() {
                match dim {
                    Some(e) if e != d => {
                        return Err(MgpError::dims(format!("component '{}' input", c.name), e, d))
                    }
                    _ => dim = Some(d),
                }
            }
        }
        Ok(dim)
    }

    pub fn components(&self) -> &[MgpComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise
    }

    pub fn gram_options(&self) -> GramOptions {
        self.gram
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        for c in &self.components {
            c.kernel.check_dim(d).map_err(|e| e.context(&c.name))?;
            c.mean.check_dim(d).map_err(|e| e.context(&c.name))?;
        }
        Ok(())
    }

    /// Unconstrained hyperparameters: per component kernel (log) then mean
    /// parameters, followed by log σ². Mixture weights are not included.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for c in &self.components {
            p.extend_from_slice(c.kernel.params());
            p.extend(c.mean.params());
        }
        p.push(self.noise.ln());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.components {
            for n in c.kernel.param_names() {
                names.push(format!("{}.kernel.{n}", c.name));
            }
            for n in c.mean.param_names() {
                names.push(format!("{}.mean.{n}", c.name));
            }
        }
        names.push("noise_variance".into());
        names
    }

    pub fn num_params(&self) -> usize {
        self.components
            .iter()
            .map(|c| c.kernel.num_params() + c.mean.num_params())
            .sum::<usize>()
            + 1
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(MgpError::dims("prior parameters", self.num_params(), p.len()));
        }
        let mut at = 0;
        let mut components = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let nk = c.kernel.num_params();
            let nm = c.mean.num_params();
            components.push(MgpComponent {
                name: c.name.clone(),
                kernel: c.kernel.with_params(&p[at..at + nk])?,
                mean: c.mean.with_params(&p[at + nk..at + nk + nm])?,
                weight: c.weight,
            });
            at += nk + nm;
        }
        let log_noise = p[at];
        let noise = log_noise.exp();
        if !log_noise.is_finite() || !noise.is_finite() || noise <= 0.0 {
            return Err(MgpError::NonFinite(format!("log noise variance {log_noise}")));
        }
        Ok(MgpPrior {
            components,
            noise,
            gram: self.gram,
        })
    }

    fn factor(&self, i: usize, pts: &Points, y: &DVector<f64>) -> Result<ComponentFactor> {
        let c = &self.components[i];
        let mut cov = c.kernel.self_gram(pts);
        self.gram.apply(&mut cov);
        let noise = self.noise_variance();
        for j in 0..cov.nrows() {
            cov[(j, j)] += noise;
        }
        let chol = linalg::cholesky(cov, &format!("covariance of component '{}'", c.name))?;
        let resid = y - c.mean.eval_points(pts);
        let alpha = chol.solve(&resid);
        let log_evidence = -0.5 * resid.dot(&alpha)
            - 0.5 * linalg::log_det(&chol)
            - 0.5 * y.len() as f64 * LN_2PI;
        if !log_evidence.is_finite() {
            return Err(MgpError::NonFinite(format!(
                "log evidence of component '{}' is {log_evidence}",
                c.name
            )));
        }
        Ok(ComponentFactor {
            chol,
            alpha,
            log_evidence,
        })
    }

    fn factors(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(Points, Vec<ComponentFactor>)> {
        validate_data(x, y)?;
        self.check_dim(x.ncols())?;
        let pts = Points::new(x);
        let f = (0..self.components.len())
            .map(|i| self.factor(i, &pts, y))
            .collect::<Result<Vec<_>>>()?;
        Ok((pts, f))
    }

    /// log N(y | m_i(X), K_i + σ²I) for each component.
    pub fn component_log_evidences(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
        Ok(self.factors(x, y)?.1.into_iter().map(|f| f.log_evidence).collect())
    }

    /// log Σ_i π_i N(y | m_i(X), K_i + σ²I).
    pub fn log_marginal_likelihood(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
        let ev = self.component_log_evidences(x, y)?;
        Ok(self.pool(&ev))
    }

    fn pool(&self, log_evidences: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(log_evidences)
            .map(|(c, e)| c.weight.ln() + e)
            .collect();
        linalg::log_sum_exp(&terms)
    }

    /// Objective value and its gradient over [`MgpPrior::params`].
    pub fn log_marginal_likelihood_grad(
        &self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        let (pts, factors) = self.factors(x, y)?;
        let ev: Vec<f64> = factors.iter().map(|f| f.log_evidence).collect();
        let value = self.pool(&ev);
        let log_resp: Vec<f64> = self
            .components
            .iter()
            .zip(&ev)
            .map(|(c, e)| c.weight.ln() + e - value)
            .collect();
        let resp = gaussmix::normalize_log_weights(&log_resp)?;

        let noise = self.noise_variance();
        let mut grad = vec![0.0; self.num_params()];
        let mut at = 0;
        let last = grad.len() - 1;
        for ((c, f), r) in self.components.iter().zip(&factors).zip(&resp) {
            let nk = c.kernel.num_params();
            let nm = c.mean.num_params();
            if *r > 0.0 {
                // W = ααᵀ − C⁻¹, so that ∂L/∂θ = ½ tr(W ∂C/∂θ)
                let mut w = &f.alpha * f.alpha.transpose() - f.chol.inverse();
                grad[last] += r * 0.5 * noise * w.trace();
                self.gram.pullback(&mut w);
                w *= 0.5 * r;
                c.kernel
                    .contract_param_grad(&pts, &pts, &w, &mut grad[at..at + nk]);
                let weighted: Vec<f64> = f.alpha.iter().map(|a| r * a).collect();
                c.mean
                    .contract_param_grad(&pts, &weighted, &mut grad[at + nk..at + nk + nm]);
            }
            at += nk + nm;
        }
        debug_assert_eq!(at, last);
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(MgpError::NonFinite(format!(
                "gradient entry '{}'",
                self.param_names()[i]
            )));
        }
        Ok((value, grad))
    }

    /// Maximizes the log marginal likelihood over the hyperparameters.
    ///
    /// Each iteration takes an Adam step and accepts it only if the objective
    /// does not decrease; rejected steps are retried at half the step size.
    pub fn fit(&self, x: &DMatrix<f64>, y: &DVector<f64>, config: &TrainConfig) -> Result<FitResult> {
        config.validate()?;
        let mut prior = self.clone();
        let mut value = prior
            .log_marginal_likelihood(x, y)
            .map_err(|e| e.context("initial objective"))?;
        let mut trace = vec![value];
        let mut adam = Adam::new(prior.num_params());
        let mut lr = config.learning_rate;
        let mut stalled = 0;
        let mut converged = false;
        let mut iterations = 0;

        while iterations < config.max_iters {
            let (_, mut grad) = prior.log_marginal_likelihood_grad(x, y)?;
            if !config.train_noise {
                *grad.last_mut().unwrap() = 0.0;
            }
            let dir = adam.direction(&grad);
            let base = prior.params();
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let proposal: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p + lr * d).collect();
                match prior.with_params(&proposal).and_then(|p| {
                    let v = p.log_marginal_likelihood(x, y)?;
                    Ok((p, v))
                }) {
                    Ok((p, v)) if v >= value => {
                        accepted = Some((p, v));
                        break;
                    }
                    Ok(_) => lr *= 0.5,
                    // A proposal can leave the factorizable region; back off.
                    Err(MgpError::NumericalDegeneracy(_)) => lr *= 0.5,
                    Err(e) => return Err(e.context(&format!("iteration {iterations}"))),
                }
            }
            iterations += 1;
            let Some((p, v)) = accepted else {
                converged = true;
                break;
            };
            let delta = v - value;
            prior = p;
            value = v;
            trace.push(value);
            lr = (lr * 1.25).min(config.learning_rate);
            if delta.abs() < config.tolerance {
                stalled += 1;
                if stalled >= config.patience {
                    converged = true;
                    break;
                }
            } else {
                stalled = 0;
            }
        }
        Ok(FitResult {
            prior,
            trace,
            iterations,
            converged,
        })
    }

    /// Posterior mixture after observing (X, y).
    pub fn condition(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<ExactMgpPosterior> {
        let (pts, factors) = self.factors(x, y)?;
        let log_w: Vec<f64> = self
            .components
            .iter()
            .zip(&factors)
            .map(|(c, f)| c.weight.ln() + f.log_evidence)
            .collect();
        let weights = gaussmix::normalize_log_weights(&log_w)?;
        Ok(ExactMgpPosterior {
            prior: self.clone(),
            x: x.clone(),
            y: y.clone(),
            pts,
            factors,
            weights,
        })
    }
}

const MAX_HALVINGS: usize = 40;

/// Optimizer settings for [`MgpPrior::fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Convergence when |Δobjective| stays below this for `patience` steps.
    pub tolerance: f64,
    pub patience: usize,
    /// When false the noise variance keeps its initial value.
    pub train_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 2000,
            learning_rate: 0.01,
            tolerance: 1e-8,
            patience: 20,
            train_noise: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MgpError::invalid("learning_rate must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(MgpError::invalid("tolerance must be nonnegative"));
        }
        if self.patience == 0 {
            return Err(MgpError::invalid("patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub prior: MgpPrior,
    /// Objective at the initial point and at every accepted iterate.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
struct ComponentFactor {
    /// Cholesky of K_nn + jitter + σ²I.
    chol: Chol,
    /// (K_nn + jitter + σ²I)⁻¹ (y − m(X)).
    alpha: DVector<f64>,
    log_evidence: f64,
}

/// A pooled prior conditioned on training data.
#[derive(Clone, Debug)]
pub struct ExactMgpPosterior {
    prior: MgpPrior,
    x: DMatrix<f64>,
    y: DVector<f64>,
    pts: Points,
    factors: Vec<ComponentFactor>,
    weights: Vec<f64>,
}

impl ExactMgpPosterior {
    pub fn prior(&self) -> &MgpPrior {
        &self.prior
    }

    /// Posterior mixture weights π_i N_i / Σ_j π_j N_j.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_evidences(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.log_evidence).collect()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.prior.pool(&self.log_evidences())
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn training_targets(&self) -> &DVector<f64> {
        &self.y
    }

    /// Lower Cholesky factor of component `i`'s training covariance.
    pub fn cholesky_factor(&self, i: usize) -> DMatrix<f64> {
        self.factors[i].chol.l()
    }

    /// Predictive mixture over latent function values at the rows of `x_star`.
    pub fn predict_f(&self, x_star: &DMatrix<f64>) -> Result<GaussianMixtureDist> {
        self.predict_with_noise(x_star, 0.0)
    }

    /// Predictive mixture over noisy observations at the rows of `x_star`.
    pub fn predict_y(&self, x_star: &DMatrix<f64>) -> Result<GaussianMixtureDist> {
        self.predict_with_noise(x_star, self.prior.noise_variance())
    }

    fn predict_with_noise(&self, x_star: &DMatrix<f64>, noise: f64) -> Result<GaussianMixtureDist> {
        if x_star.nrows() == 0 {
            return Err(MgpError::invalid("no prediction inputs"));
        }
        if x_star.ncols() != self.x.ncols() {
            return Err(MgpError::dims("prediction inputs", self.x.ncols(), x_star.ncols()));
        }
        let star = Points::new(x_star);
        let comps = self
            .prior
            .components
            .iter()
            .zip(&self.factors)
            .map(|(c, f)| {
                let k_sn = c.kernel.cross(&star, &self.pts);
                let mean = c.mean.eval_points(&star) + &k_sn * &f.alpha;
                let v = linalg::solve_lower(&f.chol, &k_sn.transpose());
                let mut cov = c.kernel.self_gram(&star);
                self.prior.gram.apply(&mut cov);
                cov -= v.tr_mul(&v);
                linalg::symmetrize(&mut cov);
                for j in 0..cov.nrows() {
                    cov[(j, j)] += noise;
                }
                GaussianDist::new(mean, cov)
                    .map_err(|e| e.context(&format!("predictive of component '{}'", c.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixtureDist::new(self.weights.clone(), comps)
    }

    pub fn fingerprint(&self) -> DataFingerprint {
        DataFingerprint::of(&self.x, &self.y)
    }

    pub fn to_model_file(&self) -> ExactModelFile {
        ExactModelFile {
            format: EXACT_FORMAT.to_string(),
            prior: self.prior.clone(),
            data: self.fingerprint(),
            posterior_weights: self.weights.clone(),
        }
    }
}

/// Identifies a training set without storing it: shape plus SHA-256 over the
/// little-endian bytes of X (row-major) followed by y.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub n: usize,
    pub d: usize,
    pub checksum: String,
}

impl DataFingerprint {
    pub fn of(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let mut h = Sha256::new();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                h.update(x[(i, j)].to_le_bytes());
            }
        }
        for v in y.iter() {
            h.update(v.to_le_bytes());
        }
        let checksum = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        DataFingerprint {
            n: x.nrows(),
            d: x.ncols(),
            checksum,
        }
    }
}

pub const EXACT_FORMAT: &str = "mgp-exact/1";

/// Saved form of a fitted exact model. The training data itself is not
/// stored; [`ExactModelFile::restore`] re-conditions on data matching the fingerprint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExactModelFile {
    pub format: String,
    pub prior: MgpPrior,
    pub data: DataFingerprint,
    pub posterior_weights: Vec<f64>,
}

impl ExactModelFile {
    pub fn restore(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<ExactMgpPosterior> {
        if self.format != EXACT_FORMAT {
            return Err(MgpError::Config(format!("unknown model format '{}'", self.format)));
        }
        let fp = DataFingerprint::of(x, y);
        if fp != self.data {
            return Err(MgpError::invalid(
                "training data does not match the model's data fingerprint",
            ));
        }
        self.prior.condition(x, y)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Default hyperparameters scaled to the data: signal variance var(y),
/// lengthscales the per-dimension input standard deviation.
pub fn default_se(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<KernelSpec> {
    let sv = linalg::variance(y.iter().copied()).max(1e-6);
    let ls: Vec<f64> = (0..x.ncols())
        .map(|j| linalg::variance(x.column(j).iter().copied()).sqrt().max(1e-3))
        .collect();
    KernelSpec::ard_se(sv, &ls)
}

/// 0.1·var(y), floored away from zero.
pub fn default_noise(y: &DVector<f64>) -> f64 {
    (0.1 * linalg::variance(y.iter().copied())).max(1e-6)
}
