//! Sparse variational mixture of GPs.
//!
//! Every component carries its own inducing inputs Z_i and a Gaussian
//! q(u_i) = N(m_i, L_i L_iᵀ) over the function values there. The mixture
//! weights get a Dirichlet prior Dir(α) and a Dirichlet variational posterior
//! Dir(α̃), so the expected weights are π̃ = α̃ / Σα̃. The bound is
//!
//! ```text
//! ELBO = (n/b) Σ_j Σ_i π̃_i [log N(y_j | μ_ij, σ²) − (k_jj − q_ij)/(2σ²) − s_ij/(2σ²)]
//!        − Σ_i KL(q(u_i) || p(u_i)) − KL(Dir(α̃) || Dir(α))
//! ```
//!
//! with μ_ij = m_i(x_j) + κ_jᵀ K_mm⁻¹ (m_i − m_i(Z_i)), q_ij = κ_jᵀ K_mm⁻¹ κ_j and
//! s_ij = κ_jᵀ K_mm⁻¹ S_i K_mm⁻¹ κ_j. Gradients are hand-derived.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::exact_mgp::{default_noise, validate_data, DataFingerprint};
use crate::gaussmix::{GaussianDist, GaussianMixtureDist};
use crate::kernels::{GramOptions, KernelSpec, MeanSpec, Points};
use crate::linalg::{self, Chol};
use crate::optim::Adam;
use crate::rng;
use crate::special::{digamma, ln_gamma, trigamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds applied to the variational Dirichlet parameters after every step.
pub const ALPHA_MIN: f64 = 1e-6;
pub const ALPHA_MAX: f64 = 1e6;

pub const SVMGP_FORMAT: &str = "mgp-svmgp/1";

/// Prior belief for one component before inducing points are placed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    #[serde(default)]
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
}

/// One component's prior and variational state.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseComponent {
    pub name: String,
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
    /// m×d inducing inputs.
    pub inducing: DMatrix<f64>,
    /// Variational mean of the inducing values.
    pub q_mean: DVector<f64>,
    /// Lower-triangular factor of the variational covariance, positive diagonal.
    pub q_chol: DMatrix<f64>,
}

impl SparseComponent {
    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn q_cov(&self) -> DMatrix<f64> {
        &self.q_chol * self.q_chol.transpose()
    }

    fn num_params(&self) -> usize {
        let m = self.num_inducing();
        self.kernel.num_params() + self.mean.num_params() + m * self.inducing.ncols() + m + m * (m + 1) / 2
    }

    fn validate(&self, d: usize) -> Result<()> {
        let m = self.num_inducing();
        let ctx = |e: MgpError| e.context(&format!("component '{}'", self.name));
        if m == 0 {
            return Err(ctx(MgpError::invalid("needs at least one inducing point")));
        }
        if self.inducing.ncols() != d {
            return Err(ctx(MgpError::dims("inducing input dimension", d, self.inducing.ncols())));
        }
        self.kernel.check_dim(d).map_err(ctx)?;
        self.mean.check_dim(d).map_err(ctx)?;
        if self.q_mean.len() != m {
            return Err(ctx(MgpError::dims("variational mean", m, self.q_mean.len())));
        }
        if self.q_chol.shape() != (m, m) {
            return Err(ctx(MgpError::dims("variational factor", m, self.q_chol.nrows())));
        }
        if self
            .inducing
            .iter()
            .chain(self.q_mean.iter())
            .chain(self.q_chol.iter())
            .any(|v| !v.is_finite())
        {
            return Err(ctx(MgpError::NonFinite("variational parameters".into())));
        }
        for p in 0..m {
            if self.q_chol[(p, p)] <= 0.0 {
                return Err(ctx(MgpError::invalid("variational factor needs a positive diagonal")));
            }
            for q in (p + 1)..m {
                if self.q_chol[(p, q)] != 0.0 {
                    return Err(ctx(MgpError::invalid("variational factor must be lower-triangular")));
                }
            }
        }
        Ok(())
    }
}

/// Sparse variational MGP: components, Dirichlet prior and posterior, noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfig", into = "ModelConfig")]
pub struct SvmgpModel {
    components: Vec<SparseComponent>,
    alpha: Vec<f64>,
    alpha_q: Vec<f64>,
    noise: f64,
    gram: GramOptions,
}

impl SvmgpModel {
    pub fn new(
        components: Vec<SparseComponent>,
        alpha: Vec<f64>,
        alpha_q: Vec<f64>,
        noise_variance: f64,
        gram: GramOptions,
    ) -> Result<Self> {
        let k = components.len();
        if k == 0 {
            return Err(MgpError::invalid("a sparse mixture needs at least one component"));
        }
        for (what, v) in [("dirichlet prior", &alpha), ("variational dirichlet", &alpha_q)] {
            if v.len() != k {
                return Err(MgpError::dims(what, k, v.len()));
            }
            if v.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                return Err(MgpError::invalid(format!("{what} entries must be positive, got {v:?}")));
            }
        }
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(MgpError::invalid(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        GramOptions::new(gram.jitter_scale)?;
        let d = components[0].inducing.ncols();
        for c in &components {
            c.validate(d)?;
        }
        Ok(SvmgpModel {
            components,
            alpha,
            alpha_q,
            noise: noise_variance,
            gram,
        })
    }

    /// Places m inducing points per component at the per-dimension empirical
    /// quantiles (k/(m+1), k = 1..m) of X, and sets every q equal to its prior:
    /// q mean m_i(Z), q covariance K_mm (jittered), α̃ = α, σ² = 0.1·var(y).
    pub fn init(
        priors: &[ComponentSpec],
        alpha: &[f64],
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        inducing_per_component: usize,
        gram: GramOptions,
    ) -> Result<Self> {
        validate_data(x, y)?;
        let (n, d) = x.shape();
        let m = inducing_per_component;
        if m == 0 || m > n {
            return Err(MgpError::invalid(format!(
                "inducing points per component must lie in 1..={n}, got {m}"
            )));
        }
        let mut z = DMatrix::zeros(m, d);
        for j in 0..d {
            let mut col: Vec<f64> = x.column(j).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            for p in 0..m {
                z[(p, j)] = linalg::quantile_sorted(&col, (p + 1) as f64 / (m + 1) as f64);
            }
        }
        let zp = Points::new(&z);
        let components = priors
            .iter()
            .map(|s| {
                s.kernel.check_dim(d)?;
                s.mean.check_dim(d)?;
                let mut kmm = s.kernel.self_gram(&zp);
                gram.apply(&mut kmm);
                let chol = linalg::cholesky(kmm, &format!("inducing covariance of component '{}'", s.name))?;
                Ok(SparseComponent {
                    name: s.name.clone(),
                    mean: s.mean.clone(),
                    kernel: s.kernel.clone(),
                    inducing: z.clone(),
                    q_mean: s.mean.eval_points(&zp),
                    q_chol: chol.l(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SvmgpModel::new(components, alpha.to_vec(), alpha.to_vec(), default_noise(y), gram)
    }

    pub fn components(&self) -> &[SparseComponent] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.components[0].inducing.ncols()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_variational(&self) -> &[f64] {
        &self.alpha_q
    }

    /// Expected mixture weights under q: α̃ / Σα̃.
    pub fn pi_tilde(&self) -> Vec<f64> {
        let total: f64 = self.alpha_q.iter().sum();
        self.alpha_q.iter().map(|a| a / total).collect()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise
    }

    pub fn gram_options(&self) -> GramOptions {
        self.gram
    }

    pub fn with_noise_variance(&self, noise_variance: f64) -> Result<Self> {
        let mut m = self.clone();
        m.noise = noise_variance;
        SvmgpModel::new(m.components, m.alpha, m.alpha_q, m.noise, m.gram)
    }

    pub fn with_alpha_variational(&self, alpha_q: Vec<f64>) -> Result<Self> {
        let m = self.clone();
        SvmgpModel::new(m.components, m.alpha, alpha_q, m.noise, m.gram)
    }

    /// Replaces component `i`'s variational mean and factor.
    pub fn with_variational(&self, i: usize, q_mean: DVector<f64>, q_chol: DMatrix<f64>) -> Result<Self> {
        let mut m = self.clone();
        let c = m
            .components
            .get_mut(i)
            .ok_or_else(|| MgpError::invalid(format!("component index {i} out of range")))?;
        c.q_mean = q_mean;
        c.q_chol = q_chol;
        SvmgpModel::new(m.components, m.alpha, m.alpha_q, m.noise, m.gram)
    }

    /// Unconstrained parameter vector. Per component: kernel log-parameters,
    /// mean parameters, inducing inputs (row-major), variational mean, the
    /// lower triangle of the variational factor (row-major, diagonal in log).
    /// Then log α̃ for every component, then log σ².
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for c in &self.components {
            p.extend_from_slice(c.kernel.params());
            p.extend(c.mean.params());
            for r in 0..c.num_inducing() {
                p.extend(c.inducing.row(r).iter());
            }
            p.extend(c.q_mean.iter());
            for r in 0..c.num_inducing() {
                for s in 0..r {
                    p.push(c.q_chol[(r, s)]);
                }
                p.push(c.q_chol[(r, r)].ln());
            }
        }
        p.extend(self.alpha_q.iter().map(|a| a.ln()));
        p.push(self.noise.ln());
        p
    }

    pub fn num_params(&self) -> usize {
        self.components.iter().map(|c| c.num_params()).sum::<usize>() + self.components.len() + 1
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_params());
        for c in &self.components {
            let n = &c.name;
            names.extend(c.kernel.param_names().into_iter().map(|p| format!("{n}.kernel.{p}")));
            names.extend(c.mean.param_names().into_iter().map(|p| format!("{n}.mean.{p}")));
            for r in 0..c.num_inducing() {
                for j in 0..c.inducing.ncols() {
                    names.push(format!("{n}.inducing[{r},{j}]"));
                }
            }
            names.extend((0..c.num_inducing()).map(|r| format!("{n}.q_mean[{r}]")));
            for r in 0..c.num_inducing() {
                for s in 0..=r {
                    names.push(format!("{n}.q_chol[{r},{s}]"));
                }
            }
        }
        names.extend(self.components.iter().map(|c| format!("{}.alpha_variational", c.name)));
        names.push("noise_variance".into());
        names
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(MgpError::dims("sparse model parameters", self.num_params(), p.len()));
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(MgpError::NonFinite(format!(
                "parameter '{}' is {}",
                self.param_names()[i],
                p[i]
            )));
        }
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &p[at..at + len];
            at += len;
            s
        };
        let mut components = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let (m, d) = c.inducing.shape();
            let kernel = c.kernel.with_params(take(c.kernel.num_params()))?;
            let mean = c.mean.with_params(take(c.mean.num_params()))?;
            let inducing = DMatrix::from_row_slice(m, d, take(m * d));
            let q_mean = DVector::from_column_slice(take(m));
            let tri = take(m * (m + 1) / 2);
            let mut q_chol = DMatrix::zeros(m, m);
            let mut t = 0;
            for r in 0..m {
                for s in 0..r {
                    q_chol[(r, s)] = tri[t];
                    t += 1;
                }
                q_chol[(r, r)] = tri[t].exp();
                t += 1;
            }
            components.push(SparseComponent {
                name: c.name.clone(),
                mean,
                kernel,
                inducing,
                q_mean,
                q_chol,
            });
        }
        let alpha_q: Vec<f64> = take(self.components.len()).iter().map(|v| v.exp()).collect();
        let noise = take(1)[0].exp();
        SvmgpModel::new(components, self.alpha.clone(), alpha_q, noise, self.gram)
            .map_err(|e| match e {
                MgpError::InvalidArgument(msg) => MgpError::NonFinite(msg),
                e => e,
            })
    }

    fn check_batch(&self, x: &DMatrix<f64>, y: &DVector<f64>, n_total: usize) -> Result<()> {
        if x.nrows() == 0 {
            return Err(MgpError::invalid("batch is empty"));
        }
        validate_data(x, y)?;
        if x.ncols() != self.input_dim() {
            return Err(MgpError::dims("batch input dimension", self.input_dim(), x.ncols()));
        }
        if n_total == 0 {
            return Err(MgpError::invalid("total data size must be positive"));
        }
        Ok(())
    }

    /// The bound and its parts for a batch drawn from a dataset of `n_total` points.
    pub fn elbo_terms(&self, x: &DMatrix<f64>, y: &DVector<f64>, n_total: usize) -> Result<ElboTerms> {
        self.evaluate(x, y, n_total, None)
    }

    pub fn elbo(&self, x: &DMatrix<f64>, y: &DVector<f64>, n_total: usize) -> Result<f64> {
        Ok(self.elbo_terms(x, y, n_total)?.value)
    }

    /// Bound value and its gradient over [`SvmgpModel::params`].
    pub fn elbo_grad(&self, x: &DMatrix<f64>, y: &DVector<f64>, n_total: usize) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        let terms = self.evaluate(x, y, n_total, Some(&mut grad))?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(MgpError::NonFinite(format!(
                "gradient entry '{}'",
                self.param_names()[i]
            )));
        }
        Ok((terms.value, grad))
    }

    fn evaluate(
        &self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        n_total: usize,
        mut grad: Option<&mut [f64]>,
    ) -> Result<ElboTerms> {
        self.check_batch(x, y, n_total)?;
        let xb = Points::new(x);
        let ratio = n_total as f64 / x.nrows() as f64;
        let pi = self.pi_tilde();
        let k = self.components.len();
        let mut expected = Vec::with_capacity(k);
        let mut kl = Vec::with_capacity(k);
        let mut noise_grad = 0.0;
        let mut at = 0;
        for i in 0..k {
            let np = self.components[i].num_params();
            let block = grad.as_deref_mut().map(|g| &mut g[at..at + np]);
            let pass = self.component_pass(i, &xb, y, ratio * pi[i], block)?;
            expected.push(ratio * pass.expected);
            kl.push(pass.kl);
            noise_grad += pass.noise_grad;
            at += np;
        }
        let kl_dir = kl_dirichlet(&self.alpha_q, &self.alpha)?;
        let data: f64 = pi.iter().zip(&expected).map(|(p, e)| p * e).sum();
        let value = data - kl.iter().sum::<f64>() - kl_dir;
        if !value.is_finite() {
            return Err(MgpError::NonFinite(format!("bound is {value}")));
        }
        if let Some(g) = grad {
            let dir = kl_dirichlet_grad(&self.alpha_q, &self.alpha);
            for i in 0..k {
                let a = self.alpha_q[i];
                g[at + i] = pi[i] * (expected[i] - data) - a * dir[i];
            }
            g[at + k] = noise_grad;
        }
        Ok(ElboTerms {
            value,
            expected_log_lik: data,
            component_expected_log_lik: expected,
            kl_components: kl,
            kl_dirichlet: kl_dir,
        })
    }

    fn inducing_factor(&self, i: usize, zp: &Points) -> Result<Chol> {
        let c = &self.components[i];
        let mut kmm = c.kernel.self_gram(zp);
        self.gram.apply(&mut kmm);
        linalg::cholesky(kmm, &format!("inducing covariance of component '{}'", c.name))
    }

    /// Unscaled batch sum of component `i`'s expected log likelihood, its
    /// Gaussian KL, and (if `grad` is given) the gradient of
    /// `scale`·expected − KL written into the component's parameter block.
    fn component_pass(
        &self,
        i: usize,
        xb: &Points,
        y: &DVector<f64>,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<ComponentPass> {
        let c = &self.components[i];
        let noise = self.noise;
        let zp = Points::new(&c.inducing);
        let m = zp.len();
        let b = xb.len();
        let chol = self.inducing_factor(i, &zp)?;
        let kmn = c.kernel.cross(&zp, xb);
        let a = chol.solve(&kmn);
        let delta = &c.q_mean - c.mean.eval_points(&zp);
        let beta = chol.solve(&delta);
        let resid = y - c.mean.eval_points(xb) - kmn.tr_mul(&beta);
        let kdiag = c.kernel.diag(xb);
        let la = c.q_chol.tr_mul(&a);
        let quad = DVector::from_fn(b, |j, _| {
            resid[j] * resid[j] + kdiag[j] - kmn.column(j).dot(&a.column(j)) + la.column(j).norm_squared()
        });
        let quad_sum = quad.sum();
        let expected = -0.5 * b as f64 * (LN_2PI + noise.ln()) - quad_sum / (2.0 * noise);

        let v = linalg::solve_lower(&chol, &c.q_chol);
        let logdet_s: f64 = 2.0 * (0..m).map(|p| c.q_chol[(p, p)].ln()).sum::<f64>();
        let kl = 0.5 * (v.norm_squared() + delta.dot(&beta) - m as f64 + linalg::log_det(&chol) - logdet_s);
        if !expected.is_finite() || !kl.is_finite() {
            return Err(MgpError::NonFinite(format!(
                "component '{}': expected log likelihood {expected}, KL {kl}",
                c.name
            )));
        }
        let noise_grad = scale * (-0.5 * b as f64 + quad_sum / (2.0 * noise));

        if let Some(g) = grad {
            let w = chol.inverse();
            let s = c.q_cov();
            let ws = &w * &s;
            let g_mu = &resid * (scale / noise);
            let a_gmu = &a * &g_mu;
            let aat = &a * a.transpose();
            // sensitivities with respect to K_mn and the jittered K_mm
            let g_mn = &beta * g_mu.transpose() + (&a - &ws * &a) * (scale / noise);
            let mut g_mm = -(&a_gmu * beta.transpose()) - &aat * (scale / (2.0 * noise))
                + &ws * &aat * (scale / noise)
                - (&w - &ws * &w - &beta * beta.transpose()) * 0.5;
            self.gram.pullback(&mut g_mm);

            let nk = c.kernel.num_params();
            let nm = c.mean.num_params();
            let d = zp.dim();
            let (g_kernel, rest) = g.split_at_mut(nk);
            let (g_mean, rest) = rest.split_at_mut(nm);
            let (g_z, rest) = rest.split_at_mut(m * d);
            let (g_qm, g_ql) = rest.split_at_mut(m);

            c.kernel.contract_param_grad(&zp, &zp, &g_mm, g_kernel);
            c.kernel.contract_param_grad(&zp, xb, &g_mn, g_kernel);
            c.kernel
                .contract_diag_param_grad(xb, &vec![-scale / (2.0 * noise); b], g_kernel);

            let g_mz: Vec<f64> = (0..m).map(|p| beta[p] - a_gmu[p]).collect();
            c.mean.contract_param_grad(xb, g_mu.as_slice(), g_mean);
            c.mean.contract_param_grad(&zp, &g_mz, g_mean);

            let mut gz = DMatrix::zeros(m, d);
            c.kernel
                .contract_input_grad(&zp, &zp, &(&g_mm + g_mm.transpose()), &mut gz);
            c.kernel.contract_input_grad(&zp, xb, &g_mn, &mut gz);
            c.mean.contract_input_grad(&g_mz, &mut gz);
            for p in 0..m {
                for j in 0..d {
                    g_z[p * d + j] = gz[(p, j)];
                }
            }

            for p in 0..m {
                g_qm[p] = a_gmu[p] - beta[p];
            }

            let l_inv_t = c
                .q_chol
                .solve_lower_triangular(&DMatrix::identity(m, m))
                .ok_or_else(|| MgpError::degenerate(format!("variational factor of '{}'", c.name)))?
                .transpose();
            let g_l = -(&aat * &c.q_chol) * (scale / noise) - &w * &c.q_chol + l_inv_t;
            let mut t = 0;
            for r in 0..m {
                for s in 0..r {
                    g_ql[t] = g_l[(r, s)];
                    t += 1;
                }
                g_ql[t] = g_l[(r, r)] * c.q_chol[(r, r)];
                t += 1;
            }
        }
        Ok(ComponentPass {
            expected,
            kl,
            noise_grad,
        })
    }

    /// KL(q(u_i) || p(u_i)) for component `i`.
    pub fn kl_gaussian_component(&self, i: usize) -> Result<f64> {
        let c = self
            .components
            .get(i)
            .ok_or_else(|| MgpError::invalid(format!("component index {i} out of range")))?;
        let zp = Points::new(&c.inducing);
        let chol = self.inducing_factor(i, &zp)?;
        let delta = &c.q_mean - c.mean.eval_points(&zp);
        let beta = chol.solve(&delta);
        let v = linalg::solve_lower(&chol, &c.q_chol);
        let m = c.num_inducing();
        let logdet_s: f64 = 2.0 * (0..m).map(|p| c.q_chol[(p, p)].ln()).sum::<f64>();
        Ok(0.5 * (v.norm_squared() + delta.dot(&beta) - m as f64 + linalg::log_det(&chol) - logdet_s))
    }

    /// Predictive mixture of the latent function at the rows of `x_star`.
    pub fn predict_f(&self, x_star: &DMatrix<f64>) -> Result<GaussianMixtureDist> {
        self.predict_with_noise(x_star, 0.0)
    }

    /// Predictive mixture of noisy observations at the rows of `x_star`.
    pub fn predict_y(&self, x_star: &DMatrix<f64>) -> Result<GaussianMixtureDist> {
        self.predict_with_noise(x_star, self.noise)
    }

    fn predict_with_noise(&self, x_star: &DMatrix<f64>, noise: f64) -> Result<GaussianMixtureDist> {
        if x_star.nrows() == 0 {
            return Err(MgpError::invalid("no prediction inputs"));
        }
        if x_star.ncols() != self.input_dim() {
            return Err(MgpError::dims("prediction input dimension", self.input_dim(), x_star.ncols()));
        }
        let xs = Points::new(x_star);
        let comps = (0..self.components.len())
            .map(|i| {
                let c = &self.components[i];
                let zp = Points::new(&c.inducing);
                let chol = self.inducing_factor(i, &zp)?;
                let kms = c.kernel.cross(&zp, &xs);
                let a = chol.solve(&kms);
                let beta = chol.solve(&(&c.q_mean - c.mean.eval_points(&zp)));
                let mean = c.mean.eval_points(&xs) + kms.tr_mul(&beta);
                let la = c.q_chol.tr_mul(&a);
                let mut cov = c.kernel.self_gram(&xs);
                self.gram.apply(&mut cov);
                cov -= kms.tr_mul(&a);
                cov += la.tr_mul(&la);
                for j in 0..cov.nrows() {
                    cov[(j, j)] += noise;
                }
                linalg::symmetrize(&mut cov);
                GaussianDist::new(mean, cov).map_err(|e| e.context(&format!("component '{}'", c.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixtureDist::new(self.pi_tilde(), comps)
    }

    /// Stochastic gradient ascent on the bound with shuffled minibatches.
    ///
    /// Returns the best model seen at an epoch boundary and the full-data
    /// bound at initialization and after every epoch.
    pub fn train(&self, x: &DMatrix<f64>, y: &DVector<f64>, config: &SvmgpTrainConfig) -> Result<SvmgpFit> {
        config.validate(x.nrows())?;
        validate_data(x, y)?;
        let n = x.nrows();
        let mut model = self.clone();
        let initial = model.elbo(x, y, n).map_err(|e| e.context("initial bound"))?;
        let mut trace = vec![initial];
        let mut best = (initial, model.clone());
        let mut adam = Adam::new(model.num_params());
        let mut rng = rng::stream(config.seed, rng::STREAM_TRAIN);
        let mut order: Vec<usize> = (0..n).collect();
        let alpha_at = model.num_params() - 1 - model.components.len();
        let noise_at = model.num_params() - 1;
        let (lo, hi) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());

        for epoch in 0..config.max_epochs {
            let ctx = |e: MgpError| e.context(&format!("epoch {epoch}"));
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let xb = linalg::select_rows(x, chunk);
                let yb = DVector::from_iterator(chunk.len(), chunk.iter().map(|&j| y[j]));
                let (_, mut g) = model.elbo_grad(&xb, &yb, n).map_err(ctx)?;
                if !config.train_noise {
                    g[noise_at] = 0.0;
                }
                let mut p = model.params();
                adam.step(&mut p, &g, config.learning_rate);
                for v in &mut p[alpha_at..noise_at] {
                    *v = v.clamp(lo, hi);
                }
                model = model.with_params(&p).map_err(ctx)?;
            }
            let value = model.elbo(x, y, n).map_err(ctx)?;
            trace.push(value);
            if value > best.0 {
                best = (value, model.clone());
            }
        }
        Ok(SvmgpFit {
            model: best.1,
            trace,
        })
    }

    pub fn to_model_file(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> SvmgpModelFile {
        SvmgpModelFile {
            format: SVMGP_FORMAT.into(),
            model: self.clone(),
            data: DataFingerprint::of(x, y),
        }
    }
}

struct ComponentPass {
    expected: f64,
    kl: f64,
    noise_grad: f64,
}

/// Parts of the bound. `component_expected_log_lik` is already scaled by n/b;
/// `expected_log_lik` is its π̃-weighted sum.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub value: f64,
    pub expected_log_lik: f64,
    pub component_expected_log_lik: Vec<f64>,
    pub kl_components: Vec<f64>,
    pub kl_dirichlet: f64,
}

/// KL(Dir(q) || Dir(p)).
pub fn kl_dirichlet(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(MgpError::dims("dirichlet parameters", q.len(), p.len()));
    }
    if q.is_empty() || q.iter().chain(p).any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(MgpError::invalid(format!(
            "dirichlet parameters must be positive, got {q:?} and {p:?}"
        )));
    }
    let q0: f64 = q.iter().sum();
    let p0: f64 = p.iter().sum();
    let psi0 = digamma(q0);
    let mut kl = ln_gamma(q0) - ln_gamma(p0);
    for (a, b) in q.iter().zip(p) {
        kl += ln_gamma(*b) - ln_gamma(*a) + (a - b) * (digamma(*a) - psi0);
    }
    Ok(kl)
}

/// ∂ KL(Dir(q) || Dir(p)) / ∂q.
fn kl_dirichlet_grad(q: &[f64], p: &[f64]) -> Vec<f64> {
    let q0: f64 = q.iter().sum();
    let p0: f64 = p.iter().sum();
    let t0 = (q0 - p0) * trigamma(q0);
    q.iter()
        .zip(p)
        .map(|(a, b)| (a - b) * trigamma(*a) - t0)
        .collect()
}

/// Settings for [`SvmgpModel::train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmgpTrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_noise: bool,
}

impl Default for SvmgpTrainConfig {
    fn default() -> Self {
        SvmgpTrainConfig {
            batch_size: 256,
            max_epochs: 200,
            learning_rate: 0.01,
            seed: 0,
            train_noise: true,
        }
    }
}

impl SvmgpTrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(MgpError::Config(format!(
                "batch size must lie in 1..={n}, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MgpError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SvmgpFit {
    pub model: SvmgpModel,
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparseComponentConfig {
    pub name: String,
    #[serde(default)]
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
    pub inducing_points: Vec<Vec<f64>>,
    pub variational_mean: Vec<f64>,
    /// Rows of the lower-triangular factor.
    pub variational_chol: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub components: Vec<SparseComponentConfig>,
    pub alpha: Vec<f64>,
    pub alpha_variational: Vec<f64>,
    pub noise_variance: f64,
    #[serde(default)]
    pub gram: GramOptions,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if let Some(bad) = rows.iter().find(|row| row.len() != c) {
        return Err(MgpError::dims(what.to_string(), c, bad.len()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl TryFrom<ModelConfig> for SvmgpModel {
    type Error = MgpError;

    fn try_from(c: ModelConfig) -> Result<Self> {
        let components = c
            .components
            .into_iter()
            .map(|s| {
                Ok(SparseComponent {
                    inducing: rows_to_matrix(&s.inducing_points, "inducing point")?,
                    q_mean: DVector::from_vec(s.variational_mean),
                    q_chol: rows_to_matrix(&s.variational_chol, "variational factor row")?,
                    name: s.name,
                    mean: s.mean,
                    kernel: s.kernel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SvmgpModel::new(components, c.alpha, c.alpha_variational, c.noise_variance, c.gram)
    }
}

impl From<SvmgpModel> for ModelConfig {
    fn from(m: SvmgpModel) -> Self {
        ModelConfig {
            components: m
                .components
                .into_iter()
                .map(|c| SparseComponentConfig {
                    inducing_points: matrix_to_rows(&c.inducing),
                    variational_mean: c.q_mean.iter().copied().collect(),
                    variational_chol: matrix_to_rows(&c.q_chol),
                    name: c.name,
                    mean: c.mean,
                    kernel: c.kernel,
                })
                .collect(),
            alpha: m.alpha,
            alpha_variational: m.alpha_q,
            noise_variance: m.noise,
            gram: m.gram,
        }
    }
}

/// Saved sparse model with the fingerprint of its training data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvmgpModelFile {
    pub format: String,
    pub model: SvmgpModel,
    pub data: DataFingerprint,
}

impl SvmgpModelFile {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f: SvmgpModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if f.format != SVMGP_FORMAT {
            return Err(MgpError::Config(format!(
                "expected model format '{SVMGP_FORMAT}', found '{}'",
                f.format
            )));
        }
        Ok(f)
    }
}
