use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::{center_columns, column_means, ridge_solve};
use crate::error::{Error, Result};
use crate::stats;

/// Ridge-penalized linear model with an unpenalized bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub ridge_lambda: f64,
}

pub fn fit_rlr(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LinearModel> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::invalid(format!("{} rows for {} targets", x.nrows(), y.len())));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::invalid(format!("ridge lambda must be non-negative, got {lambda}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression inputs".into()));
    }
    let xm = column_means(x);
    let ym = stats::mean(y);
    if lambda == f64::INFINITY {
        return Ok(LinearModel {
            weights: vec![0.0; x.ncols()],
            bias: ym,
            ridge_lambda: lambda,
        });
    }
    let xc = center_columns(x, &xm);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ym));
    let w = ridge_solve(&xc, &yc, lambda)?;
    let bias = ym - w.iter().zip(&xm).map(|(a, b)| a * b).sum::<f64>();
    Ok(LinearModel {
        weights: w.iter().copied().collect(),
        bias,
        ridge_lambda: lambda,
    })
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.bias + (0..x.ncols()).map(|j| self.weights[j] * x[(i, j)]).sum::<f64>())
            .collect()
    }
}
