use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{fit_rlr, LinearModel};
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};

pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Logistic sigmoid.
    Sigmoid,
}

/// Single-hidden-layer network with frozen random input weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElmModel {
    /// Features by hidden units.
    hidden_weights: DMatrix<f64>,
    hidden_bias: Vec<f64>,
    pub output: LinearModel,
    pub activation: Activation,
    pub seed: u64,
}

pub fn fit_elm(x: &DMatrix<f64>, y: &[f64], hidden: usize, lambda: f64, seed: u64) -> Result<ElmModel> {
    let keys: Vec<u64> = (0..x.ncols() as u64).collect();
    fit_elm_keyed(x, y, hidden, lambda, seed, &keys)
}

/// As [`fit_elm`], drawing the input weights of column `j` from a stream
/// keyed by `keys[j]`, so reordering columns together with their keys
/// reorders the weights with them.
pub fn fit_elm_keyed(
    x: &DMatrix<f64>,
    y: &[f64],
    hidden: usize,
    lambda: f64,
    seed: u64,
    keys: &[u64],
) -> Result<ElmModel> {
    if hidden == 0 {
        return Err(Error::invalid("ELM needs at least one hidden unit"));
    }
    if keys.len() != x.ncols() {
        return Err(Error::invalid(format!("{} column keys for {} columns", keys.len(), x.ncols())));
    }
    let f = x.ncols();
    let mut hidden_weights = DMatrix::zeros(f, hidden);
    for (j, key) in keys.iter().enumerate() {
        let mut rng = rng_for(seed, &[stream::ELM, *key]);
        for h in 0..hidden {
            hidden_weights[(j, h)] = rng.random_range(-1.0..=1.0);
        }
    }
    let mut rng = rng_for(seed, &[stream::ELM, u64::MAX]);
    let hidden_bias: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut model = ElmModel {
        hidden_weights,
        hidden_bias,
        output: LinearModel {
            weights: Vec::new(),
            bias: 0.0,
            ridge_lambda: lambda,
        },
        activation: Activation::Sigmoid,
        seed,
    };
    let h = model.hidden(x);
    model.output = fit_rlr(&h, y, lambda)?;
    Ok(model)
}

impl ElmModel {
    pub fn hidden_weights(&self) -> &DMatrix<f64> {
        &self.hidden_weights
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.hidden_bias
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x * &self.hidden_weights;
        for (j, mut col) in h.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = 1.0 / (1.0 + (-(*v + self.hidden_bias[j])).exp());
            }
        }
        h
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.output.predict(&self.hidden(x))
    }
}
