//! Uniform fit/predict interface over the five regression methods and the
//! repeated hold-out evaluation protocol.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::elm::{fit_elm_keyed, ElmModel, DEFAULT_HIDDEN};
use super::kernel::{fit_gpr, fit_krr, ArdParams, GprOptions, KernelModel};
use super::linear::{fit_rlr, LinearModel};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, Dataset, FeatureSchema, ForestModel, ForestParams};
use crate::par;
use crate::raster::{standardize_features, FeatureStats};
use crate::seed::{derive_seed, keyed_hash, stream};
use crate::stats::{self, compute_metrics};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_REALIZATIONS: usize = 20;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_INNER_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rlr,
    Rf,
    Elm,
    Krr,
    Gpr,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Rlr, Method::Rf, Method::Elm, Method::Krr, Method::Gpr];

    pub fn label(self) -> &'static str {
        match self {
            Method::Rlr => "rlr",
            Method::Rf => "rf",
            Method::Elm => "elm",
            Method::Krr => "krr",
            Method::Gpr => "gpr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Candidate hyperparameters searched by inner cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodGrids {
    pub rlr_lambda: Vec<f64>,
    pub elm_hidden: Vec<usize>,
    pub elm_lambda: Vec<f64>,
    /// Shared KRR lengthscales as multiples of `sqrt(F)`.
    pub krr_lengthscale: Vec<f64>,
    pub krr_lambda: Vec<f64>,
    pub rf_trees: usize,
    pub rf_min_node_size: Vec<usize>,
    pub gpr: GprOptions,
    pub inner_folds: usize,
}

impl Default for MethodGrids {
    fn default() -> Self {
        MethodGrids {
            rlr_lambda: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            elm_hidden: vec![DEFAULT_HIDDEN],
            elm_lambda: vec![1e-3, 1e-1, 10.0],
            krr_lengthscale: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            krr_lambda: vec![1e-3, 1e-2, 1e-1, 1.0],
            rf_trees: 200,
            rf_min_node_size: vec![2, 5],
            gpr: GprOptions::default(),
            inner_folds: DEFAULT_INNER_FOLDS,
        }
    }
}

impl MethodGrids {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rlr_lambda.is_empty() || self.rlr_lambda.iter().any(|l| !(*l >= 0.0)) {
            return bad("rlr_lambda must be a non-empty list of non-negative values");
        }
        if self.elm_hidden.is_empty() || self.elm_hidden.contains(&0) {
            return bad("elm_hidden must be a non-empty list of positive counts");
        }
        if self.elm_lambda.is_empty() || self.elm_lambda.iter().any(|l| !(*l >= 0.0)) {
            return bad("elm_lambda must be a non-empty list of non-negative values");
        }
        if self.krr_lengthscale.is_empty() || self.krr_lengthscale.iter().any(|l| !(*l > 0.0)) {
            return bad("krr_lengthscale must be a non-empty list of positive values");
        }
        if self.krr_lambda.is_empty() || self.krr_lambda.iter().any(|l| !(*l >= 0.0)) {
            return bad("krr_lambda must be a non-empty list of non-negative values");
        }
        if self.rf_trees == 0 || self.rf_min_node_size.is_empty() || self.rf_min_node_size.contains(&0) {
            return bad("rf_trees and rf_min_node_size must be positive");
        }
        if self.inner_folds < 2 {
            return bad("inner_folds must be at least 2");
        }
        if self.gpr.restarts == 0 || !(self.gpr.sigma_bounds.0 > 0.0 && self.gpr.sigma_bounds.0 < self.gpr.sigma_bounds.1) {
            return bad("gpr restarts must be positive with 0 < lower sigma bound < upper");
        }
        Ok(())
    }

    fn candidates(&self, method: Method) -> Vec<Hyper> {
        match method {
            Method::Rlr => self.rlr_lambda.iter().map(|&lambda| Hyper::Rlr { lambda }).collect(),
            Method::Elm => self
                .elm_hidden
                .iter()
                .flat_map(|&hidden| self.elm_lambda.iter().map(move |&lambda| Hyper::Elm { hidden, lambda }))
                .collect(),
            Method::Krr => self
                .krr_lengthscale
                .iter()
                .flat_map(|&lengthscale| {
                    self.krr_lambda
                        .iter()
                        .map(move |&lambda| Hyper::Krr { lengthscale, lambda })
                })
                .collect(),
            Method::Rf => self
                .rf_min_node_size
                .iter()
                .map(|&min_node_size| Hyper::Rf {
                    n_trees: self.rf_trees,
                    min_node_size,
                })
                .collect(),
            Method::Gpr => vec![Hyper::Gpr],
        }
    }
}

/// Hyperparameters of one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum Hyper {
    Rlr { lambda: f64 },
    Elm { hidden: usize, lambda: f64 },
    /// ARD kernel with one lengthscale `lengthscale * sqrt(F)`, `ν = 1` and
    /// `σ_n² = lambda`.
    Krr { lengthscale: f64, lambda: f64 },
    Rf { n_trees: usize, min_node_size: usize },
    /// Hyperparameters come from the marginal likelihood.
    Gpr,
}

impl Hyper {
    pub fn method(&self) -> Method {
        match self {
            Hyper::Rlr { .. } => Method::Rlr,
            Hyper::Elm { .. } => Method::Elm,
            Hyper::Krr { .. } => Method::Krr,
            Hyper::Rf { .. } => Method::Rf,
            Hyper::Gpr => Method::Gpr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelBody {
    Linear(LinearModel),
    Elm(ElmModel),
    Kernel(KernelModel),
    Forest(ForestModel),
}

/// A fitted trait model; inputs are standardized with `stats` for every
/// method except RF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub method: Method,
    pub feature_names: Vec<String>,
    pub hyper: Hyper,
    pub stats: Option<FeatureStats>,
    pub body: ModelBody,
}

fn column_key(name: &str) -> u64 {
    keyed_hash(0, name.as_bytes())
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

pub fn fit_method(x: &DMatrix<f64>, y: &[f64], names: &[String], hyper: &Hyper, seed: u64) -> Result<TrainedModel> {
    if names.len() != x.ncols() {
        return Err(Error::SchemaMismatch(format!("{} names for {} features", names.len(), x.ncols())));
    }
    if x.nrows() != y.len() {
        return Err(Error::invalid(format!("{} rows for {} targets", x.nrows(), y.len())));
    }
    let method = hyper.method();
    let (stats, body) = if method == Method::Rf {
        let Hyper::Rf { n_trees, min_node_size } = *hyper else { unreachable!() };
        let data = dataset(x, names)?;
        let mut params = ForestParams::bagged_regression(n_trees, x.nrows().max(1));
        params.min_node_size = min_node_size;
        (None, ModelBody::Forest(fit_forest(&data, y, &params, seed)?))
    } else {
        let (z, st) = standardize_features(x, None)?;
        let body = match *hyper {
            Hyper::Rlr { lambda } => ModelBody::Linear(fit_rlr(&z, y, lambda)?),
            Hyper::Elm { hidden, lambda } => {
                let keys: Vec<u64> = names.iter().map(|n| column_key(n)).collect();
                ModelBody::Elm(fit_elm_keyed(&z, y, hidden, lambda, seed, &keys)?)
            }
            Hyper::Krr { lengthscale, lambda } => {
                let f = z.ncols().max(1) as f64;
                let theta = ArdParams::shared(1.0, lengthscale * f.sqrt(), z.ncols(), lambda.sqrt());
                ModelBody::Kernel(fit_krr(&z, y, &theta)?)
            }
            Hyper::Gpr => ModelBody::Kernel(fit_gpr(&z, y, None, &GprOptions::default(), seed)?),
            Hyper::Rf { .. } => unreachable!(),
        };
        (Some(st), body)
    };
    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        method,
        feature_names: names.to_vec(),
        hyper: *hyper,
        stats,
        body,
    })
}

/// GPR with explicit optimizer options.
pub fn fit_gpr_method(
    x: &DMatrix<f64>,
    y: &[f64],
    names: &[String],
    options: &GprOptions,
    seed: u64,
) -> Result<TrainedModel> {
    let (z, st) = standardize_features(x, None)?;
    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        method: Method::Gpr,
        feature_names: names.to_vec(),
        hyper: Hyper::Gpr,
        stats: Some(st),
        body: ModelBody::Kernel(fit_gpr(&z, y, None, options, seed)?),
    })
}

fn dataset(x: &DMatrix<f64>, names: &[String]) -> Result<Dataset> {
    let cols = (0..x.ncols()).map(|j| x.column(j).iter().copied().collect()).collect();
    Dataset::from_columns(FeatureSchema::numeric(names), cols)
}

impl TrainedModel {
    fn inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.feature_names.len() {
            return Err(Error::SchemaMismatch(format!(
                "model expects {} features, got {}",
                self.feature_names.len(),
                x.ncols()
            )));
        }
        match &self.stats {
            Some(s) => Ok(standardize_features(x, Some(s))?.0),
            None => Ok(x.clone()),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.predict_with_stderr(x)?.into_iter().map(|p| p.0).collect())
    }

    /// Predictions with a standard error where the method provides one:
    /// the spread of tree predictions for RF and the latent predictive
    /// standard deviation for GPR.
    pub fn predict_with_stderr(&self, x: &DMatrix<f64>) -> Result<Vec<(f64, Option<f64>)>> {
        let z = self.inputs(x)?;
        Ok(match &self.body {
            ModelBody::Linear(m) => m.predict(&z).into_iter().map(|v| (v, None)).collect(),
            ModelBody::Elm(m) => m.predict(&z).into_iter().map(|v| (v, None)).collect(),
            ModelBody::Kernel(m) if self.method == Method::Gpr => m
                .predict_with_variance(&z)?
                .into_iter()
                .map(|(mu, var)| (mu, Some(var.sqrt())))
                .collect(),
            ModelBody::Kernel(m) => m.predict(&z).into_iter().map(|v| (v, None)).collect(),
            ModelBody::Forest(m) => {
                let data = dataset(&z, &self.feature_names)?;
                m.predict_dataset(&data)?
                    .into_iter()
                    .map(|p| (p.value, Some(p.dispersion)))
                    .collect()
            }
        })
    }

    /// Features ranked by decreasing RF importance; `None` for other methods.
    pub fn importance_ranking(&self) -> Option<Vec<(String, f64)>> {
        let ModelBody::Forest(m) = &self.body else { return None };
        let mut v: Vec<(String, f64)> = self.feature_names.iter().cloned().zip(m.variable_importance()).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Some(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(text)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "model format {} (expected {MODEL_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainedModel::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Rows in a canonical order keyed on sample ids, independent of input order.
fn hash_order(ids: &[u64], seed: u64, rows: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<(u64, u64, usize)> = rows.map(|i| (keyed_hash(seed, &ids[i].to_le_bytes()), ids[i], i)).collect();
    v.sort_unstable();
    v.into_iter().map(|t| t.2).collect()
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows)
}

/// Candidate with the lowest pooled inner-CV RMSE (first wins ties).
pub fn select_hyper(
    method: Method,
    x: &DMatrix<f64>,
    y: &[f64],
    ids: &[u64],
    names: &[String],
    grids: &MethodGrids,
    seed: u64,
) -> Result<Hyper> {
    let cands = grids.candidates(method);
    if cands.len() == 1 {
        return Ok(cands[0]);
    }
    let k = grids.inner_folds.min(x.nrows());
    if k < 2 {
        return Err(Error::InsufficientData("inner cross-validation needs at least 2 rows".into()));
    }
    let fold_seed = derive_seed(seed, &[stream::FOLD]);
    let order = hash_order(ids, fold_seed, 0..x.nrows());
    let mut fold_of = vec![0; x.nrows()];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row] = pos % k;
    }
    let units = cands.len() * k;
    let fold_preds = par::try_map_range(units, |u| -> Result<Vec<(usize, f64)>> {
        let (c, f) = (u / k, u % k);
        let train: Vec<usize> = order.iter().copied().filter(|&r| fold_of[r] != f).collect();
        let test: Vec<usize> = order.iter().copied().filter(|&r| fold_of[r] == f).collect();
        let ty: Vec<f64> = train.iter().map(|&r| y[r]).collect();
        let m = fit_method(&select_rows(x, &train), &ty, names, &cands[c], derive_seed(seed, &[stream::FOLD, u as u64]))?;
        let p = m.predict(&select_rows(x, &test))?;
        Ok(test.into_iter().zip(p).collect())
    })?;
    let mut best = (f64::INFINITY, 0);
    for c in 0..cands.len() {
        let mut sse = 0.0;
        for f in 0..k {
            for (r, p) in &fold_preds[c * k + f] {
                sse += (p - y[*r]).powi(2);
            }
        }
        let rmse = (sse / x.nrows() as f64).sqrt();
        if rmse < best.0 {
            best = (rmse, c);
        }
    }
    Ok(cands[best.1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub train_fraction: f64,
    pub realizations: usize,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            realizations: DEFAULT_REALIZATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: u64,
    pub observed: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationResult {
    pub me: f64,
    pub rmse: f64,
    pub r: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub hyper: Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub n: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub threads: usize,
    pub realizations: Vec<RealizationResult>,
    pub me_mean: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    /// Over realizations where R is defined.
    pub r_mean: Option<f64>,
    pub r_std: Option<f64>,
    /// Test-set pairs of the first realization.
    pub scatter: Vec<ScatterPoint>,
}

/// Repeated random train/test splits. Each realization tunes on its
/// training part by inner CV and scores on the rest.
pub fn evaluate_method(
    method: Method,
    trait_name: &str,
    x: &DMatrix<f64>,
    y: &[f64],
    ids: &[u64],
    names: &[String],
    protocol: &Protocol,
    grids: &MethodGrids,
) -> Result<EvalReport> {
    let n = x.nrows();
    if n < 10 {
        return Err(Error::InsufficientData(format!("evaluation needs at least 10 samples, got {n}")));
    }
    if y.len() != n || ids.len() != n {
        return Err(Error::invalid(format!("{n} rows, {} targets, {} ids", y.len(), ids.len())));
    }
    let mut uniq = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != n {
        return Err(Error::invalid("sample ids must be unique"));
    }
    if !(protocol.train_fraction > 0.0 && protocol.train_fraction < 1.0) || protocol.realizations == 0 {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1) and realizations positive, got {} and {}",
            protocol.train_fraction, protocol.realizations
        )));
    }
    grids.validate()?;
    let n_train = ((protocol.train_fraction * n as f64).round() as usize).clamp(2, n - 2);
    let names = if names.is_empty() { default_names(x.ncols()) } else { names.to_vec() };
    let runs = par::try_map_range(protocol.realizations, |r| -> Result<(RealizationResult, Vec<ScatterPoint>)> {
        let split_seed = derive_seed(protocol.seed, &[stream::SPLIT, r as u64]);
        let order = hash_order(ids, split_seed, 0..n);
        let train = &order[..n_train];
        let test = &order[n_train..];
        let tx = select_rows(x, train);
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let tid: Vec<u64> = train.iter().map(|&i| ids[i]).collect();
        let unit_seed = derive_seed(protocol.seed, &[stream::REALIZATION, r as u64]);
        let hyper = select_hyper(method, &tx, &ty, &tid, &names, grids, unit_seed)?;
        let model = if method == Method::Gpr {
            fit_gpr_method(&tx, &ty, &names, &grids.gpr, unit_seed)?
        } else {
            fit_method(&tx, &ty, &names, &hyper, unit_seed)?
        };
        let pred = model.predict(&select_rows(x, test))?;
        let obs: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let m = compute_metrics(&pred, &obs)?;
        let scatter = test
            .iter()
            .zip(&pred)
            .map(|(&i, &p)| ScatterPoint {
                id: ids[i],
                observed: y[i],
                predicted: p,
            })
            .collect();
        Ok((
            RealizationResult {
                me: m.me,
                rmse: m.rmse,
                r: m.r,
                n_train,
                n_test: test.len(),
                hyper,
            },
            scatter,
        ))
    })?;
    let mut realizations = Vec::with_capacity(runs.len());
    let mut scatter = Vec::new();
    for (i, (res, sc)) in runs.into_iter().enumerate() {
        if i == 0 {
            scatter = sc;
        }
        realizations.push(res);
    }
    let me: Vec<f64> = realizations.iter().map(|r| r.me).collect();
    let rmse: Vec<f64> = realizations.iter().map(|r| r.rmse).collect();
    let rs: Vec<f64> = realizations.iter().filter_map(|r| r.r).collect();
    Ok(EvalReport {
        method,
        trait_name: trait_name.to_string(),
        n,
        train_fraction: protocol.train_fraction,
        seed: protocol.seed,
        threads: par::current_threads(),
        me_mean: stats::mean(&me),
        rmse_mean: stats::mean(&rmse),
        rmse_std: stats::pop_std(&rmse),
        r_mean: (!rs.is_empty()).then(|| stats::mean(&rs)),
        r_std: (!rs.is_empty()).then(|| stats::pop_std(&rs)),
        realizations,
        scatter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub method: Method,
    pub train_fraction: f64,
    pub n_train: usize,
    pub r_mean: Option<f64>,
    pub r_std: Option<f64>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// [`evaluate_method`] at each training fraction.
#[allow(clippy::too_many_arguments)]
pub fn robustness_curve(
    method: Method,
    x: &DMatrix<f64>,
    y: &[f64],
    ids: &[u64],
    names: &[String],
    fractions: &[f64],
    protocol: &Protocol,
    grids: &MethodGrids,
) -> Result<Vec<RobustnessRow>> {
    for &f in fractions {
        if !(0.0..1.0).contains(&f) || ((f * x.nrows() as f64).round() as usize) < 5 {
            return Err(Error::InsufficientData(format!(
                "training fraction {f} leaves fewer than 5 training rows of {}",
                x.nrows()
            )));
        }
    }
    fractions
        .iter()
        .map(|&f| {
            let p = Protocol {
                train_fraction: f,
                ..*protocol
            };
            let rep = evaluate_method(method, "", x, y, ids, names, &p, grids)?;
            Ok(RobustnessRow {
                method,
                train_fraction: f,
                n_train: rep.realizations[0].n_train,
                r_mean: rep.r_mean,
                r_std: rep.r_std,
                rmse_mean: rep.rmse_mean,
                rmse_std: rep.rmse_std,
            })
        })
        .collect()
}
