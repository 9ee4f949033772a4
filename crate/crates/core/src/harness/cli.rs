//! `mgp` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, configuration or I/O error, 2 numerical failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use crate::error::{MgpError, Result};
use crate::harness::data::{self, Dataset, FunctionTag};
use crate::harness::experiment::{self, ExperimentConfig, FittedModel, ModelKind, ModelSetup};
use crate::harness::metrics;

#[derive(Parser, Debug)]
#[command(name = "mgp", version, about = "Regression with mixtures of Gaussian-process priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a one-dimensional regression dataset as CSV.
    Simulate {
        #[arg(long)]
        tag: FunctionTag,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
        hi: f64,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a CSV dataset and write the model file.
    Fit {
        /// Overrides the kind given in the config.
        #[arg(long)]
        model: Option<String>,
        /// Model setup (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict noisy targets with a saved model.
    Predict {
        #[arg(long)]
        model_file: PathBuf,
        /// The training data the model was fitted on.
        #[arg(long)]
        data: PathBuf,
        /// CSV whose x columns are the prediction inputs; a grid is used when absent.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 401)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset or a configured experiment.
    Experiment {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for predictions.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Store the elapsed time in the summary (makes it non-reproducible).
        #[arg(long)]
        record_time: bool,
    },
    /// Score a saved model on held-out data.
    Eval {
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, text)?;
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_setup(path: &Path) -> Result<ModelSetup> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MgpError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| MgpError::Config(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, data: &Dataset) -> Result<FittedModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MgpError::Config(format!("cannot read {}: {e}", path.display())))?;
    FittedModel::from_model_file(&text, data)
}

#[derive(Serialize)]
struct EvalReport {
    n: usize,
    rmse: f64,
    nlpd: f64,
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            tag,
            n,
            sigma,
            seed,
            lo,
            hi,
            out,
        } => {
            let d = data::simulate(tag, n, sigma, seed, lo, hi)?;
            emit(&data::to_csv(&d), out.as_deref())
        }
        Command::Fit {
            model,
            config,
            data: data_path,
            seed,
            out,
        } => {
            let mut setup = load_setup(&config)?;
            if let Some(kind) = model {
                setup.kind = match kind.as_str() {
                    "exact" => ModelKind::Exact,
                    "svmgp" => ModelKind::Svmgp,
                    other => {
                        return Err(MgpError::Config(format!(
                            "unknown model kind '{other}' (expected exact or svmgp)"
                        )))
                    }
                };
            }
            let d = data::load_csv(&data_path)?;
            let fitted = setup.fit(&d, seed)?;
            let last = fitted.objective_trace.last().copied().unwrap_or(f64::NAN);
            eprintln!(
                "fitted {} model: objective {last:.6} after {} steps, weights {:?}",
                setup.kind,
                fitted.objective_trace.len().saturating_sub(1),
                fitted.model.weights()
            );
            emit(&fitted.model.model_file_json(d.x(), d.y())?, out.as_deref())
        }
        Command::Predict {
            model_file,
            data: data_path,
            inputs,
            lo,
            hi,
            points,
            out,
        } => {
            let d = data::load_csv(&data_path)?;
            let model = load_model(&model_file, &d)?;
            let x = match inputs {
                Some(p) => data::load_csv(&p)?.x().clone(),
                None => {
                    if points < 2 || !(lo < hi) {
                        return Err(MgpError::invalid("grid needs lo < hi and at least two points"));
                    }
                    data::grid(lo, hi, points)
                }
            };
            let pred = model.predict_y(&x)?;
            if x.ncols() != 1 {
                return Err(MgpError::invalid("prediction tables need one-dimensional inputs"));
            }
            let records = experiment::prediction_records(&pred, &x, None);
            emit(&experiment::records_to_csv(&records, pred.num_components()), out.as_deref())
        }
        Command::Experiment {
            preset,
            config,
            seed,
            out,
            record_time,
        } => {
            let cfg = match (preset, config) {
                (Some(name), _) => experiment::preset(&name)?,
                (None, Some(path)) => ExperimentConfig::load(&path)?,
                (None, None) => return Err(MgpError::Config("either --preset or --config is required".into())),
            };
            let outcome = experiment::run_experiment(&cfg, seed, record_time)?;
            experiment::write_outputs(&outcome, &out)?;
            eprintln!(
                "{}: posterior weights {:?}, rmse {:.4}, nlpd {:.4}",
                cfg.name, outcome.summary.posterior_weights, outcome.summary.rmse, outcome.summary.nlpd
            );
            Ok(())
        }
        Command::Eval {
            model_file,
            data: data_path,
            test,
            out,
        } => {
            let d = data::load_csv(&data_path)?;
            let model = load_model(&model_file, &d)?;
            let t = data::load_csv(&test)?;
            let pred = model.predict_y(t.x())?;
            let y: &DVector<f64> = t.y();
            let m = metrics::metrics(&pred, y)?;
            let report = EvalReport {
                n: t.len(),
                rmse: m.rmse,
                nlpd: m.nlpd,
            };
            emit(&(serde_json::to_string_pretty(&report)? + "\n"), out.as_deref())
        }
    }
}
