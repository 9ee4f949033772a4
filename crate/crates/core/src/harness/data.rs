//! Synthetic regression data and CSV datasets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::rng;

/// Ground-truth function for simulated data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionTag {
    #[serde(rename = "sin2x")]
    Sin2x,
    Quadratic,
    Linear,
}

impl FunctionTag {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            FunctionTag::Sin2x => (2.0 * x).sin(),
            FunctionTag::Quadratic => x * x,
            FunctionTag::Linear => x,
        }
    }
}

impl std::str::FromStr for FunctionTag {
    type Err = MgpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin2x" => Ok(FunctionTag::Sin2x),
            "quadratic" => Ok(FunctionTag::Quadratic),
            "linear" => Ok(FunctionTag::Linear),
            _ => Err(MgpError::invalid(format!(
                "unknown function tag '{s}' (expected sin2x, quadratic or linear)"
            ))),
        }
    }
}

/// How a simulated dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub tag: FunctionTag,
    pub noise_sd: f64,
    pub seed: u64,
    pub range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    generator: Option<Generator>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(MgpError::invalid("dataset needs at least one row and one input column"));
        }
        if x.nrows() != y.len() {
            return Err(MgpError::dims("dataset targets", x.nrows(), y.len()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(MgpError::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset {
            x,
            y,
            generator: None,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn generator(&self) -> Option<&Generator> {
        self.generator.as_ref()
    }
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(MgpError::invalid(format!("invalid input range [{lo}, {hi}]")));
    }
    Ok(())
}

/// n points with x uniform on [lo, hi] and y = f(x) + N(0, σ²).
pub fn simulate(tag: FunctionTag, n: usize, sigma: f64, seed: u64, lo: f64, hi: f64) -> Result<Dataset> {
    check_range(lo, hi)?;
    if n == 0 {
        return Err(MgpError::invalid("simulate needs n >= 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(MgpError::invalid(format!("noise sd must be >= 0, got {sigma}")));
    }
    let mut r = rng::stream(seed, rng::STREAM_DATA);
    let xs: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    let y = DVector::from_fn(n, |i, _| tag.eval(xs[i]) + sigma * r.sample::<f64, _>(StandardNormal));
    Ok(Dataset {
        x: DMatrix::from_vec(n, 1, xs),
        y,
        generator: Some(Generator {
            tag,
            noise_sd: sigma,
            seed,
            range: [lo, hi],
        }),
    })
}

/// n evenly spaced inputs on [lo, hi] with fresh noise drawn from the holdout stream.
pub fn simulate_grid(tag: FunctionTag, n: usize, sigma: f64, seed: u64, lo: f64, hi: f64) -> Result<Dataset> {
    check_range(lo, hi)?;
    if n < 2 {
        return Err(MgpError::invalid("a grid needs at least two points"));
    }
    let mut r = rng::stream(seed, rng::STREAM_HOLDOUT);
    let x = grid(lo, hi, n);
    let y = DVector::from_fn(n, |i, _| tag.eval(x[(i, 0)]) + sigma * r.sample::<f64, _>(StandardNormal));
    Ok(Dataset {
        x,
        y,
        generator: Some(Generator {
            tag,
            noise_sd: sigma,
            seed,
            range: [lo, hi],
        }),
    })
}

/// n evenly spaced points on [lo, hi] as an n×1 matrix.
pub fn grid(lo: f64, hi: f64, n: usize) -> DMatrix<f64> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    DMatrix::from_fn(n, 1, |i, _| if i + 1 == n && n > 1 { hi } else { lo + step * i as f64 })
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MgpError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text)
}

/// Parses `x1,...,xd,y` CSV text.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| MgpError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(MgpError::Parse {
            line: 1,
            message: "empty file".into(),
        });
    }
    let cols = header.len();
    if cols < 2 || &header[cols - 1] != "y" {
        return Err(MgpError::Parse {
            line: 1,
            message: format!("expected header x1,...,xd,y, found '{}'", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let d = cols - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| MgpError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != cols {
            return Err(MgpError::Parse {
                line,
                message: format!("expected {cols} fields, found {}", rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| MgpError::Parse {
                line,
                message: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(MgpError::Parse {
                    line,
                    message: format!("non-finite value '{field}'"),
                });
            }
            if j < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(MgpError::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let n = ys.len();
    Dataset::new(DMatrix::from_row_slice(n, d, &xs), DVector::from_vec(ys))
}

pub fn to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    for j in 1..=data.dim() {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("y\n");
    for i in 0..data.len() {
        for j in 0..data.dim() {
            out.push_str(&fmt_f64(data.x[(i, j)]));
            out.push(',');
        }
        out.push_str(&fmt_f64(data.y[i]));
        out.push('\n');
    }
    out
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(data))?;
    Ok(())
}
