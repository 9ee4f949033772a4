//! Declarative experiments and the built-in presets.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::exact_mgp::{default_noise, default_se, ExactModelFile, MgpComponent, MgpPrior, TrainConfig};
use crate::gaussmix::GaussianMixtureDist;
use crate::harness::data::{self, Dataset, FunctionTag};
use crate::harness::metrics::{self, Metrics};
use crate::kernels::{GramOptions, KernelConfig, KernelKind, KernelSpec, MeanSpec};
use crate::linalg;
use crate::svmgp::{ComponentSpec, SvmgpModel, SvmgpModelFile, SvmgpTrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Exact,
    Svmgp,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Exact => "exact",
            ModelKind::Svmgp => "svmgp",
        })
    }
}

/// A kernel with explicit parameters, or just a kind whose parameters are
/// scaled to the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTemplate {
    pub kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
}

impl KernelTemplate {
    pub fn kind(kind: KernelKind) -> Self {
        KernelTemplate { kind, params: None }
    }

    pub fn fixed(spec: &KernelSpec) -> Self {
        let value = serde_json::to_value(spec).expect("kernel specs always serialize");
        KernelTemplate {
            kind: spec.kind(),
            params: value.get("params").cloned(),
        }
    }

    pub fn resolve(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<KernelSpec> {
        if let Some(params) = &self.params {
            let value = serde_json::json!({ "kind": self.kind, "params": params });
            let cfg: KernelConfig = serde_json::from_value(value)
                .map_err(|e| MgpError::Config(format!("{} kernel parameters: {e}", self.kind)))?;
            return KernelSpec::try_from(cfg);
        }
        let var_y = linalg::variance(y.iter().copied()).max(1e-6);
        match self.kind {
            KernelKind::ArdSe => default_se(x, y),
            KernelKind::Linear => {
                let var_x = (0..x.ncols())
                    .map(|j| linalg::variance(x.column(j).iter().copied()))
                    .sum::<f64>()
                    .max(1e-6);
                KernelSpec::linear(var_y, var_y / var_x)
            }
            KernelKind::Periodic => {
                if x.ncols() != 1 {
                    return Err(MgpError::dims("periodic kernel input dimension", 1, x.ncols()));
                }
                let sd_x = linalg::variance(x.column(0).iter().copied()).sqrt().max(1e-3);
                KernelSpec::periodic(var_y, 1.0, sd_x)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSetup {
    pub name: String,
    pub kernel: KernelTemplate,
    #[serde(default)]
    pub mean: MeanSpec,
    /// Prior mixture weight (exact model). Missing weights default to uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Dirichlet concentration (sparse model). Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

fn default_inducing() -> usize {
    10
}

/// Everything needed to build and train a model, independent of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSetup {
    #[serde(default)]
    pub kind: ModelKind,
    pub components: Vec<ComponentSetup>,
    /// Initial noise variance; 0.1·var(y) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_variance: Option<f64>,
    #[serde(default)]
    pub gram: GramOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub svmgp_train: SvmgpTrainConfig,
    #[serde(default = "default_inducing")]
    pub inducing_points: usize,
}

/// A model fitted by [`ModelSetup::fit`].
#[derive(Clone, Debug)]
pub enum FittedModel {
    Exact(crate::exact_mgp::ExactMgpPosterior),
    Svmgp(SvmgpModel),
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: FittedModel,
    pub prior_weights_or_alpha: Vec<f64>,
    pub objective_trace: Vec<f64>,
}

impl FittedModel {
    pub fn predict_y(&self, x: &DMatrix<f64>) -> Result<GaussianMixtureDist> {
        match self {
            FittedModel::Exact(p) => p.predict_y(x),
            FittedModel::Svmgp(m) => m.predict_y(x),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match self {
            FittedModel::Exact(p) => p.weights().to_vec(),
            FittedModel::Svmgp(m) => m.pi_tilde(),
        }
    }

    pub fn component_names(&self) -> Vec<String> {
        match self {
            FittedModel::Exact(p) => p.prior().components().iter().map(|c| c.name.clone()).collect(),
            FittedModel::Svmgp(m) => m.components().iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn model_file_json(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<String> {
        Ok(match self {
            FittedModel::Exact(p) => serde_json::to_string_pretty(&p.to_model_file())?,
            FittedModel::Svmgp(m) => serde_json::to_string_pretty(&m.to_model_file(x, y))?,
        } + "\n")
    }

    /// Reads a saved model of either kind; exact models are re-conditioned on `data`.
    pub fn from_model_file(text: &str, data: &Dataset) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let format = value.get("format").and_then(|f| f.as_str()).unwrap_or_default();
        if format == crate::svmgp::SVMGP_FORMAT {
            let f: SvmgpModelFile = serde_json::from_value(value)?;
            Ok(FittedModel::Svmgp(f.model))
        } else if format == crate::exact_mgp::EXACT_FORMAT {
            let f: ExactModelFile = serde_json::from_value(value)?;
            Ok(FittedModel::Exact(f.restore(data.x(), data.y())?))
        } else {
            Err(MgpError::Config(format!("unknown model format '{format}'")))
        }
    }
}

impl ModelSetup {
    /// Builds the prior from the data, trains it and conditions on the data.
    pub fn fit(&self, data: &Dataset, seed: u64) -> Result<Fitted> {
        if self.components.is_empty() {
            return Err(MgpError::Config("at least one component is required".into()));
        }
        let (x, y) = (data.x(), data.y());
        let kernels = self
            .components
            .iter()
            .map(|c| c.kernel.resolve(x, y).map_err(|e| e.context(&format!("component '{}'", c.name))))
            .collect::<Result<Vec<_>>>()?;
        let noise = self.noise_variance.unwrap_or_else(|| default_noise(y));
        let k = self.components.len();
        match self.kind {
            ModelKind::Exact => {
                let weights: Vec<f64> = self.components.iter().map(|c| c.weight.unwrap_or(1.0 / k as f64)).collect();
                let comps = self
                    .components
                    .iter()
                    .zip(kernels)
                    .zip(&weights)
                    .map(|((c, kernel), &weight)| MgpComponent {
                        name: c.name.clone(),
                        mean: c.mean.clone(),
                        kernel,
                        weight,
                    })
                    .collect();
                let prior = MgpPrior::new(comps, noise, self.gram)?;
                let fit = prior.fit(x, y, &self.train)?;
                Ok(Fitted {
                    model: FittedModel::Exact(fit.prior.condition(x, y)?),
                    prior_weights_or_alpha: weights,
                    objective_trace: fit.trace,
                })
            }
            ModelKind::Svmgp => {
                let alpha: Vec<f64> = self.components.iter().map(|c| c.alpha.unwrap_or(1.0)).collect();
                let specs: Vec<ComponentSpec> = self
                    .components
                    .iter()
                    .zip(kernels)
                    .map(|(c, kernel)| ComponentSpec {
                        name: c.name.clone(),
                        mean: c.mean.clone(),
                        kernel,
                    })
                    .collect();
                let model = SvmgpModel::init(&specs, &alpha, x, y, self.inducing_points, self.gram)?
                    .with_noise_variance(noise)?;
                let train = SvmgpTrainConfig {
                    seed,
                    ..self.svmgp_train.clone()
                };
                let fit = model.train(x, y, &train)?;
                Ok(Fitted {
                    model: FittedModel::Svmgp(fit.model),
                    prior_weights_or_alpha: alpha,
                    objective_trace: fit.trace,
                })
            }
        }
    }
}

/// Where the training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Simulated with the run seed.
    Generator {
        tag: FunctionTag,
        n: usize,
        noise_sd: f64,
        range: [f64; 2],
    },
    File { path: PathBuf },
}

/// Held-out targets used for rmse/nlpd. Without one, the training data is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum HoldoutSpec {
    /// Evenly spaced inputs with fresh generator noise.
    Grid { n: usize, range: [f64; 2] },
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub range: [f64; 2],
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            range: [-4.0, 4.0],
            points: 401,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSetup,
    pub data: DataSource,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<HoldoutSpec>,
}

/// One row of the prediction table.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub x: f64,
    pub mean: f64,
    pub sd: f64,
    pub truth_mean: Option<f64>,
    pub truth_sd: Option<f64>,
    pub component_means: Vec<f64>,
    pub component_sds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub preset: String,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub prior_weights_or_alpha: Vec<f64>,
    pub posterior_weights: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub rmse: f64,
    pub nlpd: f64,
    pub wall_time_seconds: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<PredictionRecord>,
    pub summary: Summary,
    pub component_names: Vec<String>,
    pub metrics: Metrics,
}

fn sin2x(n: usize, lo: f64, hi: f64) -> DataSource {
    DataSource::Generator {
        tag: FunctionTag::Sin2x,
        n,
        noise_sd: 0.2,
        range: [lo, hi],
    }
}

fn component(name: &str, kernel: KernelTemplate) -> ComponentSetup {
    ComponentSetup {
        name: name.into(),
        kernel,
        mean: MeanSpec::Zero,
        weight: None,
        alpha: None,
    }
}

/// A period guess of 3 for a truth with period π: informed but not exact.
fn periodic_guess() -> KernelTemplate {
    KernelTemplate::fixed(&KernelSpec::periodic(0.5, 1.0, 3.0).expect("valid periodic parameters"))
}

pub const PRESETS: [&str; 3] = ["fig1", "fig2", "fig3"];

/// Built-in experiments: `fig1` (Linear vs SE fallback), `fig2` (periodic
/// extrapolation) and `fig3` (sparse model on 10,000 points).
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let exact = |components| ModelSetup {
        kind: ModelKind::Exact,
        components,
        noise_variance: None,
        gram: GramOptions::default(),
        train: TrainConfig::default(),
        svmgp_train: SvmgpTrainConfig::default(),
        inducing_points: default_inducing(),
    };
    match name {
        "fig1" => Ok(ExperimentConfig {
            name: name.into(),
            model: exact(vec![
                ComponentSetup {
                    weight: Some(0.5),
                    ..component("linear", KernelTemplate::kind(KernelKind::Linear))
                },
                ComponentSetup {
                    weight: Some(0.5),
                    ..component("se", KernelTemplate::kind(KernelKind::ArdSe))
                },
            ]),
            data: sin2x(40, -4.0, 4.0),
            grid: GridSpec::default(),
            holdout: Some(HoldoutSpec::Grid {
                n: 200,
                range: [-4.0, 4.0],
            }),
        }),
        "fig2" => Ok(ExperimentConfig {
            name: name.into(),
            model: exact(vec![
                ComponentSetup {
                    weight: Some(0.8),
                    ..component("periodic", periodic_guess())
                },
                ComponentSetup {
                    weight: Some(0.2),
                    ..component("se", KernelTemplate::kind(KernelKind::ArdSe))
                },
            ]),
            data: sin2x(20, 0.0, 4.0),
            grid: GridSpec::default(),
            holdout: Some(HoldoutSpec::Grid {
                n: 200,
                range: [-4.0, 0.0],
            }),
        }),
        "fig3" => Ok(ExperimentConfig {
            name: name.into(),
            model: ModelSetup {
                kind: ModelKind::Svmgp,
                inducing_points: 3,
                ..exact(vec![
                    ComponentSetup {
                        alpha: Some(3.0),
                        ..component("linear", KernelTemplate::kind(KernelKind::Linear))
                    },
                    ComponentSetup {
                        alpha: Some(3.0),
                        ..component("periodic", periodic_guess())
                    },
                    ComponentSetup {
                        alpha: Some(3.0),
                        ..component("se", KernelTemplate::kind(KernelKind::ArdSe))
                    },
                ])
            },
            data: sin2x(10_000, -4.0, 4.0),
            grid: GridSpec::default(),
            holdout: Some(HoldoutSpec::Grid {
                n: 200,
                range: [-4.0, 4.0],
            }),
        }),
        _ => Err(MgpError::Config(format!(
            "unknown preset '{name}' (expected one of {})",
            PRESETS.join(", ")
        ))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MgpError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| MgpError::Config(format!("{}: {e}", path.display())))
    }

    pub fn training_data(&self, seed: u64) -> Result<Dataset> {
        match &self.data {
            DataSource::Generator { tag, n, noise_sd, range } => {
                data::simulate(*tag, *n, *noise_sd, seed, range[0], range[1])
            }
            DataSource::File { path } => data::load_csv(path),
        }
    }

    fn holdout_data(&self, train: &Dataset, seed: u64) -> Result<Dataset> {
        match &self.holdout {
            None => Ok(train.clone()),
            Some(HoldoutSpec::File { path }) => data::load_csv(path),
            Some(HoldoutSpec::Grid { n, range }) => match &self.data {
                DataSource::Generator { tag, noise_sd, .. } => {
                    data::simulate_grid(*tag, *n, *noise_sd, seed, range[0], range[1])
                }
                DataSource::File { .. } => Err(MgpError::Config(
                    "a grid holdout needs generated training data".into(),
                )),
            },
        }
    }
}

/// Prediction rows on a one-dimensional grid.
pub fn prediction_records(
    pred: &GaussianMixtureDist,
    x: &DMatrix<f64>,
    truth: Option<(FunctionTag, f64)>,
) -> Vec<PredictionRecord> {
    (0..pred.dim())
        .map(|j| {
            let (mean, var) = pred.marginal_moments(j);
            let xj = x[(j, 0)];
            PredictionRecord {
                x: xj,
                mean,
                sd: var.max(0.0).sqrt(),
                truth_mean: truth.map(|(tag, _)| tag.eval(xj)),
                truth_sd: truth.map(|(_, sd)| sd),
                component_means: pred.components().iter().map(|c| c.mean()[j]).collect(),
                component_sds: pred.components().iter().map(|c| c.covariance()[(j, j)].sqrt()).collect(),
            }
        })
        .collect()
}

pub fn records_to_csv(records: &[PredictionRecord], num_components: usize) -> String {
    let mut out = String::from("x,mean,sd,truth_mean,truth_sd");
    for i in 1..=num_components {
        out.push_str(&format!(",comp{i}_mean,comp{i}_sd"));
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(data::fmt_f64).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            data::fmt_f64(r.x),
            data::fmt_f64(r.mean),
            data::fmt_f64(r.sd),
            opt(r.truth_mean),
            opt(r.truth_sd)
        ));
        for (m, s) in r.component_means.iter().zip(&r.component_sds) {
            out.push_str(&format!(",{},{}", data::fmt_f64(*m), data::fmt_f64(*s)));
        }
        out.push('\n');
    }
    out
}

/// Simulates or loads data, fits, predicts on the grid and scores the holdout.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, record_time: bool) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let ctx = |stage: &str| {
        let name = config.name.clone();
        let stage = stage.to_string();
        move |e: MgpError| e.context(&format!("experiment '{name}', {stage}"))
    };
    let train = config.training_data(seed).map_err(ctx("training data"))?;
    let holdout = config.holdout_data(&train, seed).map_err(ctx("holdout data"))?;
    let fitted = config.model.fit(&train, seed).map_err(ctx("fitting"))?;

    if train.dim() != 1 {
        return Err(MgpError::Config(format!(
            "experiment '{}': grid predictions need one-dimensional inputs",
            config.name
        )));
    }
    let g = config.grid;
    if g.points < 2 || !(g.range[0] < g.range[1]) {
        return Err(MgpError::Config(format!("experiment '{}': invalid grid", config.name)));
    }
    let xg = data::grid(g.range[0], g.range[1], g.points);
    let pred = fitted.model.predict_y(&xg).map_err(ctx("grid prediction"))?;
    let truth = train.generator().map(|gen| (gen.tag, gen.noise_sd));
    let records = prediction_records(&pred, &xg, truth);

    let held = fitted.model.predict_y(holdout.x()).map_err(ctx("holdout prediction"))?;
    let scores = metrics::metrics(&held, holdout.y()).map_err(ctx("metrics"))?;

    let summary = Summary {
        preset: config.name.clone(),
        seed,
        model_kind: config.model.kind,
        prior_weights_or_alpha: fitted.prior_weights_or_alpha.clone(),
        posterior_weights: fitted.model.weights(),
        objective_trace: fitted.objective_trace.clone(),
        rmse: scores.rmse,
        nlpd: scores.nlpd,
        wall_time_seconds: record_time.then(|| start.elapsed().as_secs_f64()),
    };
    Ok(ExperimentOutcome {
        records,
        summary,
        component_names: fitted.model.component_names(),
        metrics: scores,
    })
}

/// Writes `predictions.csv` and `summary.json` into `dir`, creating it if needed.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let k = outcome.component_names.len();
    std::fs::write(dir.join("predictions.csv"), records_to_csv(&outcome.records, k))?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&outcome.summary)? + "\n",
    )?;
    Ok(())
}
