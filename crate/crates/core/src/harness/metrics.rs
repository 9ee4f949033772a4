//! Point and density scores for held-out predictions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::gaussmix::GaussianMixtureDist;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Mean negative log density of each target under its one-point marginal.
    pub nlpd: f64,
}

pub fn metrics(pred: &GaussianMixtureDist, y_true: &DVector<f64>) -> Result<Metrics> {
    if pred.dim() != y_true.len() {
        return Err(MgpError::dims("held-out targets", pred.dim(), y_true.len()));
    }
    let n = y_true.len() as f64;
    let mut sq = 0.0;
    let mut nll = 0.0;
    for (j, y) in y_true.iter().enumerate() {
        let (m, _) = pred.marginal_moments(j);
        sq += (y - m) * (y - m);
        nll -= pred.marginal_logpdf(j, *y);
    }
    Ok(Metrics {
        rmse: (sq / n).sqrt(),
        nlpd: nll / n,
    })
}
