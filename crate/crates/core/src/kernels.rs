//! Covariance and mean functions.
//!
//! Every positive kernel parameter is stored as its logarithm, so gradients
//! returned here are with respect to the log values. Canonical orderings:
//!
//! | kernel     | parameters (log domain)           |
//! |------------|-----------------------------------|
//! | `ard_se`   | signal variance, lengthscale 1..d |
//! | `linear`   | bias variance, weight variance    |
//! | `periodic` | signal variance, lengthscale, period |
//!
//! Mean parameters are unconstrained: `constant` has its value, `linear` has
//! its weights followed by the bias.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    ArdSe,
    Linear,
    Periodic,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::ArdSe => "ard_se",
            KernelKind::Linear => "linear",
            KernelKind::Periodic => "periodic",
        })
    }
}

/// A parameterized covariance function.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "KernelConfig", into = "KernelConfig")]
pub struct KernelSpec {
    kind: KernelKind,
    log_params: Vec<f64>,
    values: Vec<f64>,
}

// Equality is on the natural values; the cached logs may differ in the last bit.
impl PartialEq for KernelSpec {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.values == other.values
    }
}

/// Natural-domain wire format: `{"kind": ..., "params": {...}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum KernelConfig {
    ArdSe {
        signal_variance: f64,
        lengthscales: Vec<f64>,
    },
    Linear {
        bias_variance: f64,
        weight_variance: f64,
    },
    Periodic {
        signal_variance: f64,
        lengthscale: f64,
        period: f64,
    },
}

impl TryFrom<KernelConfig> for KernelSpec {
    type Error = MgpError;

    fn try_from(c: KernelConfig) -> Result<Self> {
        match c {
            KernelConfig::ArdSe {
                signal_variance,
                lengthscales,
            } => KernelSpec::ard_se(signal_variance, &lengthscales),
            KernelConfig::Linear {
                bias_variance,
                weight_variance,
            } => KernelSpec::linear(bias_variance, weight_variance),
            KernelConfig::Periodic {
                signal_variance,
                lengthscale,
                period,
            } => KernelSpec::periodic(signal_variance, lengthscale, period),
        }
    }
}

impl From<KernelSpec> for KernelConfig {
    fn from(k: KernelSpec) -> Self {
        let v = &k.values;
        match k.kind {
            KernelKind::ArdSe => KernelConfig::ArdSe {
                signal_variance: v[0],
                lengthscales: v[1..].to_vec(),
            },
            KernelKind::Linear => KernelConfig::Linear {
                bias_variance: v[0],
                weight_variance: v[1],
            },
            KernelKind::Periodic => KernelConfig::Periodic {
                signal_variance: v[0],
                lengthscale: v[1],
                period: v[2],
            },
        }
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(MgpError::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

impl KernelSpec {
    pub fn ard_se(signal_variance: f64, lengthscales: &[f64]) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(MgpError::invalid("ard_se needs at least one lengthscale"));
        }
        let mut values = vec![positive("signal_variance", signal_variance)?];
        for &l in lengthscales {
            values.push(positive("lengthscale", l)?);
        }
        Ok(Self::from_values(KernelKind::ArdSe, values))
    }

    /// One-dimensional squared exponential.
    pub fn se(signal_variance: f64, lengthscale: f64) -> Result<Self> {
        Self::ard_se(signal_variance, &[lengthscale])
    }

    /// k(x,x') = σ_b² + σ_v²·⟨x,x'⟩. The bias variance is log-parameterized,
    /// so it must be strictly positive.
    pub fn linear(bias_variance: f64, weight_variance: f64) -> Result<Self> {
        let values = vec![
            positive("bias_variance", bias_variance)?,
            positive("weight_variance", weight_variance)?,
        ];
        Ok(Self::from_values(KernelKind::Linear, values))
    }

    /// k(x,x') = σ²·exp(−2·sin²(π|x−x'|/p)/ℓ²) on one-dimensional inputs.
    pub fn periodic(signal_variance: f64, lengthscale: f64, period: f64) -> Result<Self> {
        let values = vec![
            positive("signal_variance", signal_variance)?,
            positive("lengthscale", lengthscale)?,
            positive("period", period)?,
        ];
        Ok(Self::from_values(KernelKind::Periodic, values))
    }

    // Keeps the caller's natural values verbatim so serialization round-trips exactly.
    fn from_values(kind: KernelKind, values: Vec<f64>) -> Self {
        KernelSpec {
            kind,
            log_params: values.iter().map(|v| v.ln()).collect(),
            values,
        }
    }

    pub fn from_log_params(kind: KernelKind, log_params: Vec<f64>) -> Result<Self> {
        let expected = match kind {
            KernelKind::ArdSe => {
                if log_params.len() < 2 {
                    return Err(MgpError::invalid("ard_se needs at least one lengthscale"));
                }
                log_params.len()
            }
            KernelKind::Linear => 2,
            KernelKind::Periodic => 3,
        };
        if log_params.len() != expected {
            return Err(MgpError::dims(format!("{kind} parameters"), expected, log_params.len()));
        }
        let values: Vec<f64> = log_params.iter().map(|p| p.exp()).collect();
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(MgpError::NonFinite(format!(
                "{kind} parameters out of range: {log_params:?} (log domain)"
            )));
        }
        Ok(KernelSpec {
            kind,
            log_params,
            values,
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Input dimension the kernel is tied to, if any.
    pub fn input_dim(&self) -> Option<usize> {
        match self.kind {
            KernelKind::ArdSe => Some(self.values.len() - 1),
            KernelKind::Linear => None,
            KernelKind::Periodic => Some(1),
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.input_dim() {
            Some(e) if e != d => Err(MgpError::dims(format!("{} kernel input", self.kind), e, d)),
            _ if d == 0 => Err(MgpError::invalid("inputs must have at least one dimension")),
            _ => Ok(()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.log_params.len()
    }

    /// Unconstrained (log-domain) parameter vector in canonical order.
    pub fn params(&self) -> &[f64] {
        &self.log_params
    }

    /// Natural-domain parameter values in canonical order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            KernelKind::ArdSe => std::iter::once("signal_variance".to_string())
                .chain((1..self.values.len()).map(|j| format!("lengthscale_{j}")))
                .collect(),
            KernelKind::Linear => vec!["bias_variance".into(), "weight_variance".into()],
            KernelKind::Periodic => {
                vec!["signal_variance".into(), "lengthscale".into(), "period".into()]
            }
        }
    }

    pub fn with_params(&self, log_params: &[f64]) -> Result<Self> {
        Self::from_log_params(self.kind, log_params.to_vec())
    }

    /// k(x, x') with dimension checks.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(MgpError::dims("kernel arguments", x.len(), x2.len()));
        }
        self.check_dim(x.len())?;
        Ok(self.k(x, x2))
    }

    /// Unchecked evaluation; callers guarantee matching dimensions.
    #[inline]
    pub(crate) fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let v = &self.values;
        match self.kind {
            KernelKind::ArdSe => {
                let mut q = 0.0;
                for j in 0..a.len() {
                    let t = (a[j] - b[j]) / v[1 + j];
                    q += t * t;
                }
                v[0] * (-0.5 * q).exp()
            }
            KernelKind::Linear => v[0] + v[1] * dot(a, b),
            KernelKind::Periodic => {
                let s = (PI * (a[0] - b[0]) / v[2]).sin();
                v[0] * (-2.0 * s * s / (v[1] * v[1])).exp()
            }
        }
    }

    /// k(a,b) and its gradient with respect to the log parameters, written to `grad`.
    #[inline]
    pub(crate) fn k_param_grad(&self, a: &[f64], b: &[f64], grad: &mut [f64]) -> f64 {
        let v = &self.values;
        match self.kind {
            KernelKind::ArdSe => {
                let k = self.k(a, b);
                grad[0] = k;
                for j in 0..a.len() {
                    let t = (a[j] - b[j]) / v[1 + j];
                    grad[1 + j] = k * t * t;
                }
                k
            }
            KernelKind::Linear => {
                let d = v[1] * dot(a, b);
                grad[0] = v[0];
                grad[1] = d;
                v[0] + d
            }
            KernelKind::Periodic => {
                let arg = PI * (a[0] - b[0]) / v[2];
                let s = arg.sin();
                let l2 = v[1] * v[1];
                let k = v[0] * (-2.0 * s * s / l2).exp();
                grad[0] = k;
                grad[1] = k * 4.0 * s * s / l2;
                grad[2] = k * 2.0 / l2 * arg * (2.0 * arg).sin();
                k
            }
        }
    }

    /// Gradient of k(a,b) with respect to the first argument, written to `grad`.
    #[inline]
    pub(crate) fn k_input_grad(&self, a: &[f64], b: &[f64], grad: &mut [f64]) {
        let v = &self.values;
        match self.kind {
            KernelKind::ArdSe => {
                let k = self.k(a, b);
                for j in 0..a.len() {
                    let l2 = v[1 + j] * v[1 + j];
                    grad[j] = -k * (a[j] - b[j]) / l2;
                }
            }
            KernelKind::Linear => {
                for j in 0..a.len() {
                    grad[j] = v[1] * b[j];
                }
            }
            KernelKind::Periodic => {
                let arg = PI * (a[0] - b[0]) / v[2];
                let k = self.k(a, b);
                grad[0] = -k * 2.0 / (v[1] * v[1]) * (2.0 * arg).sin() * PI / v[2];
            }
        }
    }

    /// Gram matrix over the rows of `x` with jitter added to the diagonal.
    /// Fails if the jittered matrix cannot be Cholesky-factorized.
    pub fn gram(&self, x: &DMatrix<f64>, opts: &GramOptions) -> Result<DMatrix<f64>> {
        let k = self.gram_unchecked(x, opts)?;
        linalg::cholesky(k.clone(), &format!("{} gram matrix", self.kind))?;
        Ok(k)
    }

    /// Gram matrix with jitter, without attempting a factorization.
    pub fn gram_unchecked(&self, x: &DMatrix<f64>, opts: &GramOptions) -> Result<DMatrix<f64>> {
        if x.nrows() == 0 {
            return Err(MgpError::invalid("gram needs at least one input"));
        }
        self.check_dim(x.ncols())?;
        let pts = Points::new(x);
        let mut k = self.self_gram(&pts);
        opts.apply(&mut k);
        Ok(k)
    }

    pub(crate) fn self_gram(&self, pts: &Points) -> DMatrix<f64> {
        let n = pts.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.k(pts.row(i), pts.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    pub(crate) fn cross(&self, a: &Points, b: &Points) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.k(a.row(i), b.row(j)))
    }

    pub(crate) fn diag(&self, pts: &Points) -> DVector<f64> {
        DVector::from_fn(pts.len(), |i, _| self.k(pts.row(i), pts.row(i)))
    }

    /// Cross-covariance between the rows of `x` and `x2`; no jitter.
    pub fn cross_gram(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != x2.ncols() {
            return Err(MgpError::dims("cross_gram inputs", x.ncols(), x2.ncols()));
        }
        self.check_dim(x.ncols())?;
        Ok(self.cross(&Points::new(x), &Points::new(x2)))
    }

    /// ∂K/∂θ for every log parameter θ, including the jitter's dependence on θ.
    pub fn param_grads(&self, x: &DMatrix<f64>, opts: &GramOptions) -> Result<Vec<DMatrix<f64>>> {
        self.check_dim(x.ncols())?;
        let pts = Points::new(x);
        let n = pts.len();
        let p = self.num_params();
        let mut out = vec![DMatrix::zeros(n, n); p];
        let mut g = vec![0.0; p];
        for i in 0..n {
            for j in 0..=i {
                self.k_param_grad(pts.row(i), pts.row(j), &mut g);
                for (t, m) in out.iter_mut().enumerate() {
                    m[(i, j)] = g[t];
                    m[(j, i)] = g[t];
                }
            }
        }
        for m in out.iter_mut() {
            opts.apply(m);
        }
        Ok(out)
    }

    /// Σ_pq w_pq ∂k(a_p, b_q)/∂θ accumulated into `out`.
    pub(crate) fn contract_param_grad(
        &self,
        a: &Points,
        b: &Points,
        w: &DMatrix<f64>,
        out: &mut [f64],
    ) {
        let mut g = vec![0.0; self.num_params()];
        for p in 0..a.len() {
            for q in 0..b.len() {
                let wpq = w[(p, q)];
                if wpq == 0.0 {
                    continue;
                }
                self.k_param_grad(a.row(p), b.row(q), &mut g);
                for (o, gt) in out.iter_mut().zip(&g) {
                    *o += wpq * gt;
                }
            }
        }
    }

    /// Σ_p w_p ∂k(a_p, a_p)/∂θ accumulated into `out`.
    pub(crate) fn contract_diag_param_grad(&self, a: &Points, w: &[f64], out: &mut [f64]) {
        let mut g = vec![0.0; self.num_params()];
        for (p, wp) in w.iter().enumerate() {
            self.k_param_grad(a.row(p), a.row(p), &mut g);
            for (o, gt) in out.iter_mut().zip(&g) {
                *o += wp * gt;
            }
        }
    }

    /// out[p, :] += Σ_q w_pq ∂k(a_p, b_q)/∂a_p.
    pub(crate) fn contract_input_grad(
        &self,
        a: &Points,
        b: &Points,
        w: &DMatrix<f64>,
        out: &mut DMatrix<f64>,
    ) {
        let d = a.dim();
        let mut g = vec![0.0; d];
        for p in 0..a.len() {
            for q in 0..b.len() {
                let wpq = w[(p, q)];
                if wpq == 0.0 {
                    continue;
                }
                self.k_input_grad(a.row(p), b.row(q), &mut g);
                for j in 0..d {
                    out[(p, j)] += wpq * g[j];
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major copy of an input matrix, for contiguous per-point access.
#[derive(Clone, Debug)]
pub(crate) struct Points {
    data: Vec<f64>,
    d: usize,
}

impl Points {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let (n, d) = x.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(x[(i, j)]);
            }
        }
        Points { data, d }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.data.len() / self.d
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

/// Diagonal stabilization of training Gram matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramOptions {
    /// Jitter added to the diagonal is `jitter_scale` × the mean raw diagonal.
    pub jitter_scale: f64,
}

impl Default for GramOptions {
    fn default() -> Self {
        GramOptions { jitter_scale: 1e-6 }
    }
}

impl GramOptions {
    pub fn new(jitter_scale: f64) -> Result<Self> {
        if !(jitter_scale >= 0.0 && jitter_scale.is_finite()) {
            return Err(MgpError::invalid(format!(
                "jitter_scale must be nonnegative, got {jitter_scale}"
            )));
        }
        Ok(GramOptions { jitter_scale })
    }

    pub fn none() -> Self {
        GramOptions { jitter_scale: 0.0 }
    }

    /// Jitter that `apply` would add to `raw`.
    pub fn jitter(&self, raw: &DMatrix<f64>) -> f64 {
        self.jitter_scale * linalg::mean_diagonal(raw)
    }

    /// Adds the jitter in place. Linear in `m`, so it also maps a derivative
    /// of the raw matrix to the derivative of the jittered one.
    pub fn apply(&self, m: &mut DMatrix<f64>) {
        if self.jitter_scale == 0.0 {
            return;
        }
        let j = self.jitter(m);
        for i in 0..m.nrows() {
            m[(i, i)] += j;
        }
    }

    /// Pulls a sensitivity matrix G (w.r.t. the jittered matrix) back to the raw
    /// matrix: G + (s·tr G / n)·I.
    pub(crate) fn pullback(&self, g: &mut DMatrix<f64>) {
        if self.jitter_scale == 0.0 {
            return;
        }
        let n = g.nrows();
        let c = self.jitter_scale * g.trace() / n as f64;
        for i in 0..n {
            g[(i, i)] += c;
        }
    }
}

/// A parameterized mean function.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum MeanSpec {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
}

impl MeanSpec {
    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            MeanSpec::Linear { weights, .. } if weights.len() != d => {
                Err(MgpError::dims("linear mean weights", weights.len(), d))
            }
            _ => Ok(()),
        }
    }

    /// Elementwise evaluation over the rows of `x`.
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(x.ncols())?;
        Ok(self.eval_points(&Points::new(x)))
    }

    pub(crate) fn eval_points(&self, pts: &Points) -> DVector<f64> {
        DVector::from_fn(pts.len(), |i, _| self.m(pts.row(i)))
    }

    #[inline]
    pub(crate) fn m(&self, x: &[f64]) -> f64 {
        match self {
            MeanSpec::Zero => 0.0,
            MeanSpec::Constant { value } => *value,
            MeanSpec::Linear { weights, bias } => dot(weights, x) + bias,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            MeanSpec::Zero => 0,
            MeanSpec::Constant { .. } => 1,
            MeanSpec::Linear { weights, .. } => weights.len() + 1,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            MeanSpec::Zero => vec![],
            MeanSpec::Constant { value } => vec![*value],
            MeanSpec::Linear { weights, bias } => {
                let mut p = weights.clone();
                p.push(*bias);
                p
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            MeanSpec::Zero => vec![],
            MeanSpec::Constant { .. } => vec!["value".into()],
            MeanSpec::Linear { weights, .. } => (1..=weights.len())
                .map(|j| format!("weight_{j}"))
                .chain(std::iter::once("bias".into()))
                .collect(),
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(MgpError::dims("mean parameters", self.num_params(), p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MgpError::NonFinite(format!("mean parameters {p:?}")));
        }
        Ok(match self {
            MeanSpec::Zero => MeanSpec::Zero,
            MeanSpec::Constant { .. } => MeanSpec::Constant { value: p[0] },
            MeanSpec::Linear { weights, .. } => MeanSpec::Linear {
                weights: p[..weights.len()].to_vec(),
                bias: p[weights.len()],
            },
        })
    }

    /// Σ_p w_p ∂m(x_p)/∂θ accumulated into `out`.
    pub(crate) fn contract_param_grad(&self, pts: &Points, w: &[f64], out: &mut [f64]) {
        match self {
            MeanSpec::Zero => {}
            MeanSpec::Constant { .. } => out[0] += w.iter().sum::<f64>(),
            MeanSpec::Linear { weights, .. } => {
                let d = weights.len();
                for (p, wp) in w.iter().enumerate() {
                    let x = pts.row(p);
                    for j in 0..d {
                        out[j] += wp * x[j];
                    }
                    out[d] += wp;
                }
            }
        }
    }

    /// out[p, :] += w_p ∂m(x_p)/∂x_p.
    pub(crate) fn contract_input_grad(&self, w: &[f64], out: &mut DMatrix<f64>) {
        if let MeanSpec::Linear { weights, .. } = self {
            for (p, wp) in w.iter().enumerate() {
                for (j, wj) in weights.iter().enumerate() {
                    out[(p, j)] += wp * wj;
                }
            }
        }
    }
}
