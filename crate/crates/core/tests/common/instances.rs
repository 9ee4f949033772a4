//! Random model instances and the oracles that check them.

use super::*;
use mgp::rng;
use mgp::svmgp::{ComponentSpec, SvmgpModel};
use mgp::{GramOptions, KernelSpec, MeanSpec, MgpComponent, MgpPrior, SvmgpTrainConfig};
use rand::Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative-error floor for gradient comparisons: entries smaller than this
/// are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn random_kernel(r: &mut impl Rng, d: usize, which: usize) -> KernelSpec {
    match (which % 3, d) {
        (1, _) => KernelSpec::linear(r.random_range(0.1..1.0), r.random_range(0.2..1.5)).unwrap(),
        (2, 1) => KernelSpec::periodic(
            r.random_range(0.5..2.0),
            r.random_range(0.5..1.5),
            r.random_range(1.5..4.0),
        )
        .unwrap(),
        _ => {
            let ls: Vec<f64> = (0..d).map(|_| r.random_range(0.5..2.0)).collect();
            KernelSpec::ard_se(r.random_range(0.5..2.0), &ls).unwrap()
        }
    }
}

pub fn random_mean(r: &mut impl Rng, d: usize) -> MeanSpec {
    match r.random_range(0..3) {
        0 => MeanSpec::Zero,
        1 => MeanSpec::Constant {
            value: r.random_range(-1.0..1.0),
        },
        _ => MeanSpec::Linear {
            weights: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            bias: r.random_range(-1.0..1.0),
        },
    }
}

fn random_data(r: &mut impl Rng, n: usize, d: usize) -> (DMatrix<f64>, DVector<f64>) {
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |i, _| {
        (1.3 * x[(i, 0)]).sin() + 0.3 * x.row(i).sum() + 0.1 * r.random_range(-1.0..1.0)
    });
    (x, y)
}

/// A random k=3 pooled prior with data (n ≤ 10, d ∈ {1, 2}).
pub fn random_exact_instance(seed: u64) -> (MgpPrior, DMatrix<f64>, DVector<f64>) {
    let mut r = rng::stream(seed, 70);
    let d = if seed % 3 == 2 { 2 } else { 1 };
    let n = r.random_range(4..=10);
    let (x, y) = random_data(&mut r, n, d);
    let raw: Vec<f64> = (0..3).map(|_| r.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let components = (0..3)
        .map(|i| MgpComponent {
            name: format!("c{i}"),
            mean: random_mean(&mut r, d),
            kernel: random_kernel(&mut r, d, i + seed as usize),
            weight: raw[i] / total,
        })
        .collect();
    let prior = MgpPrior::new(components, r.random_range(0.05..0.5), GramOptions::default()).unwrap();
    (prior, x, y)
}

/// Worst relative error between the analytic gradient and central differences,
/// with the name of the offending parameter.
pub fn exact_gradient_error(seed: u64) -> (f64, String) {
    let (prior, x, y) = random_exact_instance(seed);
    let (_, grad) = prior.log_marginal_likelihood_grad(&x, &y).unwrap();
    let fd = central_diff(&prior.params(), 1e-5, |p| {
        prior.with_params(p).unwrap().log_marginal_likelihood(&x, &y).unwrap()
    });
    let (e, i) = max_rel_err(&grad, &fd, GRAD_FLOOR);
    (e, prior.param_names()[i].clone())
}

/// A random sparse model moved away from its initial state
/// (k ≤ 3, n ≤ 20, m ≤ 4).
pub fn random_sparse_instance(seed: u64) -> (SvmgpModel, DMatrix<f64>, DVector<f64>) {
    let mut r = rng::stream(seed, 71);
    let d = if seed % 4 == 3 { 2 } else { 1 };
    let n = r.random_range(6..=20);
    let k = r.random_range(1..=3);
    let (x, y) = random_data(&mut r, n, d);
    let specs: Vec<ComponentSpec> = (0..k)
        .map(|i| ComponentSpec {
            name: format!("c{i}"),
            mean: random_mean(&mut r, d),
            kernel: random_kernel(&mut r, d, i + seed as usize),
        })
        .collect();
    let m = r.random_range(1..=max_inducing(&specs, d, 4));
    let alpha: Vec<f64> = (0..k).map(|_| r.random_range(0.5..4.0)).collect();
    let model = SvmgpModel::init(&specs, &alpha, &x, &y, m, GramOptions::default()).unwrap();
    let mut p = model.params();
    let jiggle: Vec<f64> = (0..p.len()).map(|_| r.random_range(-0.3..0.3)).collect();
    for (v, j) in p.iter_mut().zip(jiggle) {
        *v += j;
    }
    (model.with_params(&p).unwrap(), x, y)
}

/// A linear kernel's Gram matrix has rank at most d + 1; more inducing points
/// than that leave K_mm singular up to jitter.
pub fn max_inducing(specs: &[ComponentSpec], d: usize, cap: usize) -> usize {
    if specs.iter().any(|s| s.kernel.kind() == mgp::KernelKind::Linear) {
        cap.min(d + 1)
    } else {
        cap
    }
}

pub fn sparse_gradient_error(seed: u64) -> (f64, String) {
    let (model, x, y) = random_sparse_instance(seed);
    // Evaluate on a strict subset so the n/b scaling is exercised.
    let b = (x.nrows() * 2 / 3).max(1);
    let idx: Vec<usize> = (0..b).collect();
    let xb = mgp::linalg::select_rows(&x, &idx);
    let yb = DVector::from_fn(b, |i, _| y[i]);
    let n = x.nrows();
    let (_, grad) = model.elbo_grad(&xb, &yb, n).unwrap();
    let fd = central_diff(&model.params(), 1e-5, |p| {
        model.with_params(p).unwrap().elbo(&xb, &yb, n).unwrap()
    });
    let (e, i) = max_rel_err(&grad, &fd, GRAD_FLOOR);
    (e, model.param_names()[i].clone())
}

/// Plain GP posterior written out with explicit inverses:
/// mean m(X*) + K*n C⁻¹ (y − m(X)), covariance K** − K*n C⁻¹ Kn*, C = K + σ²I.
pub fn plain_gp_posterior(
    kernel: &KernelSpec,
    mean: &MeanSpec,
    noise: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    xs: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let eval = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            let ai: Vec<f64> = a.row(i).iter().copied().collect();
            let bj: Vec<f64> = b.row(j).iter().copied().collect();
            kernel.eval(&ai, &bj).unwrap()
        })
    };
    let c = eval(x, x) + DMatrix::identity(x.nrows(), x.nrows()) * noise;
    let c_inv = c.try_inverse().unwrap();
    let ksn = eval(xs, x);
    let resid = y - mean.eval(x).unwrap();
    let mu = mean.eval(xs).unwrap() + &ksn * &c_inv * resid;
    let cov = eval(xs, xs) - &ksn * &c_inv * ksn.transpose();
    (mu, cov)
}

/// Largest entrywise gap between the single-component exact predictive
/// (observations) and the explicit-inverse GP plus noise, for kernel variant
/// `which` on n ≤ 100 points.
pub fn single_component_exact_error(which: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, 72);
    let n = r.random_range(20..=100);
    let (x, y) = random_data(&mut r, n, 1);
    let kernel = random_kernel(&mut r, 1, which);
    let mean = random_mean(&mut r, 1);
    let noise = r.random_range(0.05..0.5);
    let xs = DMatrix::from_fn(15, 1, |_, _| r.random_range(-3.0..3.0));
    let prior = MgpPrior::new(
        vec![MgpComponent {
            name: "only".into(),
            mean: mean.clone(),
            kernel: kernel.clone(),
            weight: 1.0,
        }],
        noise,
        GramOptions::none(),
    )
    .unwrap();
    let pred = prior.condition(&x, &y).unwrap().predict_y(&xs).unwrap();
    let (mu, cov) = plain_gp_posterior(&kernel, &mean, noise, &x, &y, &xs);
    let cov = cov + DMatrix::identity(xs.nrows(), xs.nrows()) * noise;
    let comp = &pred.components()[0];
    let dm = (comp.mean() - mu).amax();
    let dc = (comp.covariance() - cov).amax();
    dm.max(dc)
}

/// Single-component sparse model with Z = X and q set to the exact posterior
/// over f(X); returns the largest gap to the exact GP predictive mean.
pub fn sparse_optimal_q_error(seed: u64) -> f64 {
    let mut r = rng::stream(seed, 73);
    let n = r.random_range(5..=25);
    let (x, y) = random_data(&mut r, n, 1);
    let kernel = random_kernel(&mut r, 1, seed as usize);
    let mean = random_mean(&mut r, 1);
    let spec = ComponentSpec {
        name: "only".into(),
        mean: mean.clone(),
        kernel: kernel.clone(),
    };
    let gram = GramOptions::default();
    let model = SvmgpModel::init(&[spec], &[1.0], &x, &y, n, gram).unwrap();
    let noise = model.noise_variance();
    let mut model = model;
    // Put the inducing inputs on the data.
    let mut p = model.params();
    let off = kernel.num_params() + mean.num_params();
    for i in 0..n {
        p[off + i] = x[(i, 0)];
    }
    model = model.with_params(&p).unwrap();

    let mut kmm = kernel.gram_unchecked(&x, &gram).unwrap();
    let kmm_j = kmm.clone();
    let mx = mean.eval(&x).unwrap();
    let mut c = kmm.clone();
    for i in 0..n {
        c[(i, i)] += noise;
    }
    let c_inv = c.try_inverse().unwrap();
    let q_mean = &mx + &kmm_j * &c_inv * (&y - &mx);
    kmm -= &kmm_j * &c_inv * &kmm_j;
    mgp::linalg::symmetrize(&mut kmm);
    let q_chol = kmm.cholesky().unwrap().l();
    let model = model.with_variational(0, q_mean, q_chol).unwrap();

    let xs = DMatrix::from_fn(20, 1, |_, _| r.random_range(-3.0..3.0));
    let sparse = model.predict_y(&xs).unwrap();
    // Exact reference with the same jittered training covariance.
    let prior = MgpPrior::new(
        vec![MgpComponent {
            name: "only".into(),
            mean,
            kernel,
            weight: 1.0,
        }],
        noise,
        gram,
    )
    .unwrap();
    let exact = prior.condition(&x, &y).unwrap().predict_y(&xs).unwrap();
    (sparse.components()[0].mean() - exact.components()[0].mean()).amax()
}

/// log Σ_i (α_i/α₀) N(y | m_i(X), K_i + σ²I), without jitter on K_i.
pub fn pooled_evidence(model: &SvmgpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let a0: f64 = model.alpha().iter().sum();
    let components = model
        .components()
        .iter()
        .zip(model.alpha())
        .map(|(c, a)| MgpComponent {
            name: c.name.clone(),
            mean: c.mean.clone(),
            kernel: c.kernel.clone(),
            weight: a / a0,
        })
        .collect();
    MgpPrior::new(components, model.noise_variance(), GramOptions::none())
        .unwrap()
        .log_marginal_likelihood(x, y)
        .unwrap()
}

/// Largest (bound − evidence) over the initial, midway and final states of a
/// full-batch training run on a random instance with n ≤ 30, k ≤ 3.
pub fn elbo_bound_excess(seed: u64) -> f64 {
    let mut r = rng::stream(seed, 74);
    let n = r.random_range(5..=30);
    let k = r.random_range(1..=3);
    let (x, y) = random_data(&mut r, n, 1);
    let specs: Vec<ComponentSpec> = (0..k)
        .map(|i| ComponentSpec {
            name: format!("c{i}"),
            mean: random_mean(&mut r, 1),
            kernel: random_kernel(&mut r, 1, i + seed as usize),
        })
        .collect();
    let m = r.random_range(1..=max_inducing(&specs, 1, n.min(5)));
    let alpha: Vec<f64> = (0..k).map(|_| r.random_range(0.5..5.0)).collect();
    let mut model = SvmgpModel::init(&specs, &alpha, &x, &y, m, GramOptions::default()).unwrap();
    let mut worst = f64::MIN;
    let config = SvmgpTrainConfig {
        batch_size: n,
        max_epochs: 20,
        learning_rate: 0.05,
        seed,
        train_noise: true,
    };
    for stage in 0..3 {
        // The pooled evidence is evaluated with the model's current hyperparameters.
        let bound = model.elbo(&x, &y, n).unwrap();
        worst = worst.max(bound - pooled_evidence(&model, &x, &y));
        if stage < 2 {
            model = model.train(&x, &y, &config).unwrap().model;
        }
    }
    worst
}
