mod common;

use common::instances::*;
use common::lemmas;
use common::*;
use mgp::rng;
use mgp::svmgp::{kl_dirichlet, ComponentSpec, SvmgpModel, SvmgpModelFile, ALPHA_MIN};
use mgp::{GramOptions, KernelSpec, MeanSpec, SvmgpTrainConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn spec(name: &str, kernel: KernelSpec) -> ComponentSpec {
    ComponentSpec {
        name: name.into(),
        mean: MeanSpec::Zero,
        kernel,
    }
}

fn wave(n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(n, 1, |i, _| -3.0 + 6.0 * i as f64 / (n - 1) as f64);
    let y = x.column(0).map(|v| (2.0 * v).sin() + 0.1 * (7.0 * v).cos());
    (x, y)
}

/// Standard single-process sparse bound written with explicit inverses:
/// log N(y | μ, σ²I) − tr(K_nn − Q_nn)/(2σ²) − tr(A S Aᵀ)/(2σ²) − KL.
fn textbook_svgp_bound(model: &SvmgpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let c = &model.components()[0];
    let s2 = model.noise_variance();
    let z = &c.inducing;
    let kmm = c.kernel.gram_unchecked(z, &model.gram_options()).unwrap();
    let kmm_inv = kmm.clone().try_inverse().unwrap();
    let knm = c.kernel.cross_gram(x, z).unwrap();
    let knn = c.kernel.cross_gram(x, x).unwrap();
    let a = &knm * &kmm_inv;
    let mz = c.mean.eval(z).unwrap();
    let mu = c.mean.eval(x).unwrap() + &a * (&c.q_mean - &mz);
    let s = c.q_cov();
    let n = x.nrows() as f64;
    let r = y - &mu;
    let fit = -0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() - r.norm_squared() / (2.0 * s2);
    let qnn = &a * knm.transpose();
    let corr = (knn - qnn).trace() / (2.0 * s2) + (&a * &s * a.transpose()).trace() / (2.0 * s2);
    let m = z.nrows() as f64;
    let d = &c.q_mean - &mz;
    let kl = 0.5
        * ((&kmm_inv * &s).trace() + (d.transpose() * &kmm_inv * &d)[(0, 0)] - m + kmm.determinant().ln()
            - s.determinant().ln());
    fit - corr - kl
}

#[test]
fn single_component_matches_textbook_bound() {
    for seed in 0..10 {
        let (model, x, y) = random_sparse_instance(seed);
        let mut r = rng::stream(seed, 3);
        // keep only the first component
        let c = model.components()[0].clone();
        let one = SvmgpModel::new(vec![c], vec![1e6], vec![1e6], model.noise_variance(), model.gram_options())
            .unwrap();
        let mut p = one.params();
        for v in p.iter_mut() {
            *v += r.random_range(-0.1..0.1);
        }
        let one = one.with_params(&p).unwrap();
        let got = one.elbo(&x, &y, x.nrows()).unwrap();
        let want = textbook_svgp_bound(&one, &x, &y);
        assert!((got - want).abs() < 1e-8, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..20 {
        let (e, name) = sparse_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {name} rel err {e:e}");
    }
}

#[test]
fn dirichlet_gradient_at_init_with_symmetric_data() {
    let (x, y) = wave(21);
    let model = SvmgpModel::init(
        &[spec("se", KernelSpec::se(1.0, 1.0).unwrap()), spec("lin", KernelSpec::linear(0.5, 0.5).unwrap())],
        &[2.0, 2.0],
        &x,
        &y,
        3,
        GramOptions::default(),
    )
    .unwrap();
    let (_, g) = model.elbo_grad(&x, &y, 21).unwrap();
    let k = model.num_params();
    let fd = central_diff(&model.params(), 1e-5, |p| model.with_params(p).unwrap().elbo(&x, &y, 21).unwrap());
    for i in (k - 3)..(k - 1) {
        assert!(g[i].is_finite());
        assert!(rel_err(g[i], fd[i], GRAD_FLOOR) < 1e-4, "{} vs {}", g[i], fd[i]);
    }
}

#[test]
fn negligible_component_is_driven_by_its_kl() {
    let (x, y) = wave(15);
    let model = SvmgpModel::init(
        &[spec("a", KernelSpec::se(1.0, 0.7).unwrap()), spec("b", KernelSpec::se(1.0, 1.5).unwrap())],
        &[1.0, 1.0],
        &x,
        &y,
        3,
        GramOptions::default(),
    )
    .unwrap()
    .with_alpha_variational(vec![ALPHA_MIN, 1e6])
    .unwrap()
    .with_variational(0, DVector::from_column_slice(&[0.5, -0.2, 0.3]), DMatrix::identity(3, 3) * 0.7)
    .unwrap();
    let (_, g) = model.elbo_grad(&x, &y, 15).unwrap();
    let off = model.components()[0].kernel.num_params() + 3;
    let q0 = model.components()[0].q_mean.clone();
    let kl_fd = central_diff(q0.as_slice(), 1e-5, |q| {
        let m = model
            .with_variational(0, DVector::from_column_slice(q), model.components()[0].q_chol.clone())
            .unwrap();
        -m.kl_gaussian_component(0).unwrap()
    });
    for p in 0..3 {
        assert!(rel_err(g[off + p], kl_fd[p], 1e-8) < 1e-6, "{} vs {}", g[off + p], kl_fd[p]);
    }
}

#[test]
fn kl_terms_do_not_see_the_batch() {
    let (model, x, y) = random_sparse_instance(2);
    let a = model.elbo_terms(&x, &y, 40).unwrap();
    let xb = x.rows(0, 3).into_owned();
    let yb = y.rows(0, 3).into_owned();
    let b = model.elbo_terms(&xb, &yb, 40).unwrap();
    assert_eq!(a.kl_components, b.kl_components);
    assert_eq!(a.kl_dirichlet, b.kl_dirichlet);
}

#[test]
fn duplicated_data_doubles_the_likelihood_term() {
    let (model, x, y) = random_sparse_instance(7);
    let n = x.nrows();
    let a = model.elbo_terms(&x, &y, n).unwrap();
    let x2 = DMatrix::from_fn(2 * n, x.ncols(), |i, j| x[(i % n, j)]);
    let y2 = DVector::from_fn(2 * n, |i, _| y[i % n]);
    let b = model.elbo_terms(&x2, &y2, 2 * n).unwrap();
    assert!((b.expected_log_lik - 2.0 * a.expected_log_lik).abs() < 1e-10 * a.expected_log_lik.abs().max(1.0));
    assert_eq!(a.kl_components, b.kl_components);
    assert_eq!(a.kl_dirichlet, b.kl_dirichlet);
}

#[test]
fn minibatch_estimates_average_to_the_full_data_value() {
    let (model, x, y) = random_sparse_instance(11);
    let n = x.nrows();
    let full = model.elbo_terms(&x, &y, n).unwrap().expected_log_lik;
    for b in (1..=n).filter(|b| n % b == 0) {
        let mut sum = 0.0;
        for start in (0..n).step_by(b) {
            let xb = x.rows(start, b).into_owned();
            let yb = y.rows(start, b).into_owned();
            sum += model.elbo_terms(&xb, &yb, n).unwrap().expected_log_lik;
        }
        let mean = sum / (n / b) as f64;
        assert!((mean - full).abs() < 1e-8 * full.abs().max(1.0), "batch {b}: {mean} vs {full}");
    }
}

#[test]
fn empty_batch_is_rejected() {
    let (model, x, _) = random_sparse_instance(1);
    assert!(model.elbo(&DMatrix::zeros(0, x.ncols()), &DVector::zeros(0), 5).is_err());
}

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let (x, y) = wave(10);
    let model = SvmgpModel::init(&[spec("se", KernelSpec::se(1.0, 1.5).unwrap())], &[1.0], &x, &y, 2, GramOptions::default())
        .unwrap()
        .with_variational(
            0,
            DVector::from_column_slice(&[0.4, -0.3]),
            DMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.3, 0.5]),
        )
        .unwrap();
    let c = &model.components()[0];
    let kmm = c.kernel.gram(&c.inducing, &model.gram_options()).unwrap();
    let q = mgp::GaussianDist::new(c.q_mean.clone(), c.q_cov()).unwrap();
    let p = mgp::GaussianDist::new(DVector::zeros(2), kmm).unwrap();
    let draws = mgp::GaussianMixtureDist::single(q.clone()).sample(1_000_000, 21);
    let vals: Vec<f64> = (0..draws.nrows())
        .map(|i| {
            let u = draws.row(i).transpose();
            q.logpdf(&u).unwrap() - p.logpdf(&u).unwrap()
        })
        .collect();
    let (m, se) = mean_and_se(&vals);
    let kl = model.kl_gaussian_component(0).unwrap();
    assert!((kl - m).abs() < 3.0 * se, "closed form {kl}, monte carlo {m} ± {se}");
}

#[test]
fn dirichlet_kl_matches_monte_carlo() {
    let (kl, m, se) = lemmas::dirichlet_kl_monte_carlo(&[2.0, 2.0], &[1.0, 1.0], 1_000_000, 5);
    assert!((kl - m).abs() < 3.0 * se, "closed form {kl}, monte carlo {m} ± {se}");
}

#[test]
fn dirichlet_kl_is_nonnegative_and_zero_only_at_equality() {
    let mut r = rng::stream(8, 8);
    for _ in 0..1000 {
        let k = r.random_range(1..=5);
        let a: Vec<f64> = (0..k).map(|_| r.random_range(0.05..20.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v * r.random_range(0.5..2.0)).collect();
        assert!(kl_dirichlet(&a, &a).unwrap().abs() < 1e-10);
        let kl = kl_dirichlet(&a, &b).unwrap();
        if k > 1 {
            assert!(kl > 0.0, "{a:?} {b:?} -> {kl}");
        } else {
            assert!(kl.abs() < 1e-12);
        }
    }
}

#[test]
fn prior_state_reproduces_the_prior_at_inducing_points() {
    let (x, y) = wave(12);
    let kernel = KernelSpec::periodic(1.0, 0.9, 3.0).unwrap();
    let model = SvmgpModel::init(&[spec("p", kernel.clone())], &[1.0], &x, &y, 4, GramOptions::default()).unwrap();
    let z = model.components()[0].inducing.clone();
    let pred = model.predict_f(&z).unwrap();
    let prior = kernel.gram(&z, &GramOptions::default()).unwrap();
    assert!((pred.components()[0].covariance() - &prior).amax() < 1e-10);
    assert!(pred.components()[0].mean().amax() < 1e-12);
}

#[test]
fn optimal_variational_state_recovers_the_exact_mean() {
    for seed in 0..6 {
        let e = sparse_optimal_q_error(seed);
        assert!(e < 1e-6, "seed {seed}: {e:e}");
    }
}

#[test]
fn predictive_variances_are_nonnegative() {
    let (model, _, _) = random_sparse_instance(5);
    let xs = uniform_matrix(30, model.input_dim(), -4.0, 4.0, 1);
    let pred = model.predict_f(&xs).unwrap();
    for c in pred.components() {
        assert!(c.covariance().diagonal().min() >= -1e-10);
    }
    let total: f64 = pred.weights().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn bound_never_exceeds_the_pooled_evidence() {
    for seed in 0..10 {
        let excess = elbo_bound_excess(seed);
        assert!(excess <= 1e-8, "seed {seed}: bound exceeds evidence by {excess:e}");
    }
}

#[test]
fn training() {
    let (x, y) = wave(40);
    let model = SvmgpModel::init(
        &[spec("se", KernelSpec::se(1.0, 1.0).unwrap()), spec("lin", KernelSpec::linear(0.5, 0.5).unwrap())],
        &[3.0, 3.0],
        &x,
        &y,
        5,
        GramOptions::default(),
    )
    .unwrap();
    let none = SvmgpTrainConfig {
        max_epochs: 0,
        batch_size: 10,
        ..SvmgpTrainConfig::default()
    };
    let fit = model.train(&x, &y, &none).unwrap();
    assert_eq!(fit.model, model);
    assert_eq!(fit.trace.len(), 1);

    let cfg = SvmgpTrainConfig {
        max_epochs: 30,
        batch_size: 10,
        learning_rate: 0.02,
        seed: 4,
        train_noise: true,
    };
    let a = model.train(&x, &y, &cfg).unwrap();
    let b = model.train(&x, &y, &cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), 31);
    let final_value = a.model.elbo(&x, &y, 40).unwrap();
    assert!(final_value >= a.trace[0]);
    assert!(a.model.pi_tilde()[0] > 0.5, "{:?}", a.model.pi_tilde());

    let too_big = SvmgpTrainConfig {
        batch_size: 41,
        ..cfg
    };
    assert!(model.train(&x, &y, &too_big).is_err());
}

#[test]
fn model_file_round_trip() {
    let (model, x, y) = random_sparse_instance(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sparse.json");
    model.to_model_file(&x, &y).save(&path).unwrap();
    let back = SvmgpModelFile::load(&path).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.data, mgp::exact_mgp::DataFingerprint::of(&x, &y));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expected_weights_ignore_the_scale_of_alpha(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let (model, _, _) = random_sparse_instance(seed);
        let scaled: Vec<f64> = model.alpha_variational().iter().map(|a| a * scale).collect();
        let other = model.with_alpha_variational(scaled).unwrap();
        for (a, b) in model.pi_tilde().iter().zip(other.pi_tilde()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
