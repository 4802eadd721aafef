//! Bagged and boosted tree ensembles.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, FeatureSchema, Task};
use super::tree::{argmax, fit_tree_rows, Tree, TreeParams, DEFAULT_MIN_NODE_SIZE};
use crate::error::{Error, Result};
use crate::par;
use crate::seed::{rng_for, stream};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForestMode {
    Bagged,
    Boosted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_splits: usize,
    /// Shrinkage applied to each boosted tree; ignored in bagged mode.
    pub learning_rate: f64,
    pub mode: ForestMode,
    pub task: Task,
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    /// Bagged trees are fit on a bootstrap sample of the training rows.
    pub bootstrap: bool,
}

impl ForestParams {
    pub fn bagged_regression(n_trees: usize, max_splits: usize) -> Self {
        ForestParams {
            n_trees,
            max_splits,
            learning_rate: 1.0,
            mode: ForestMode::Bagged,
            task: Task::Regression,
            mtry: None,
            min_node_size: DEFAULT_MIN_NODE_SIZE,
            bootstrap: true,
        }
    }

    pub fn boosted_regression(n_trees: usize, learning_rate: f64, max_splits: usize) -> Self {
        ForestParams {
            n_trees,
            max_splits,
            learning_rate,
            mode: ForestMode::Boosted,
            task: Task::Regression,
            mtry: None,
            min_node_size: DEFAULT_MIN_NODE_SIZE,
            bootstrap: false,
        }
    }

    pub fn classification(n_trees: usize, n_classes: usize, max_splits: usize) -> Self {
        ForestParams {
            task: Task::Classification { n_classes },
            ..Self::bagged_regression(n_trees, max_splits)
        }
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_splits: self.max_splits,
            min_node_size: self.min_node_size,
            mtry: self.mtry,
            task: self.task,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        if self.mode == ForestMode::Boosted {
            if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
                return Err(Error::invalid("learning_rate must lie in (0, 1]"));
            }
            if self.task != Task::Regression {
                return Err(Error::invalid("boosting supports regression only"));
            }
        }
        Ok(())
    }
}

/// Ensemble estimate and spread across trees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Regression mean, or the winning class index.
    pub value: f64,
    /// Population std of per-tree predictions, or 1 - winning vote fraction.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub schema: FeatureSchema,
    pub params: ForestParams,
    /// Boosting offset (training mean); zero in bagged mode.
    pub init: f64,
    pub trees: Vec<Tree>,
    /// Per-predictor importance computed at fit time.
    pub training_mse_decrease: Vec<f64>,
}

/// Fit an ensemble. Tree `t` draws from a stream derived from `seed` and `t`,
/// so the model does not depend on the worker count.
pub fn fit_forest(data: &Dataset, targets: &[f64], params: &ForestParams, seed: u64) -> Result<ForestModel> {
    params.validate()?;
    if targets.len() != data.n_rows() {
        return Err(Error::invalid("targets length differs from row count"));
    }
    let observed: Vec<usize> = (0..data.n_rows()).filter(|&r| targets[r].is_finite()).collect();
    if observed.is_empty() {
        return Err(Error::InsufficientData("all targets missing".into()));
    }
    let tp = params.tree_params();
    let (init, trees) = match params.mode {
        ForestMode::Bagged => {
            let trees = par::try_map_range(params.n_trees, |t| {
                let mut rng = rng_for(seed, &[stream::TREE, t as u64]);
                let rows: Vec<usize> = if params.bootstrap {
                    (0..observed.len())
                        .map(|_| observed[rng.random_range(0..observed.len())])
                        .collect()
                } else {
                    observed.clone()
                };
                let y: Vec<f64> = rows.iter().map(|&r| targets[r]).collect();
                fit_tree_rows(data, &rows, &y, &tp, &mut rng)
            })?;
            (0.0, trees)
        }
        ForestMode::Boosted => {
            let init = observed.iter().map(|&r| targets[r]).sum::<f64>() / observed.len() as f64;
            let mut fitted = vec![init; observed.len()];
            let mut trees = Vec::with_capacity(params.n_trees);
            for t in 0..params.n_trees {
                let mut rng = rng_for(seed, &[stream::TREE, t as u64]);
                let residual: Vec<f64> = observed.iter().zip(&fitted).map(|(&r, f)| targets[r] - f).collect();
                let (rows, y) = if params.bootstrap {
                    let idx: Vec<usize> = (0..observed.len()).map(|_| rng.random_range(0..observed.len())).collect();
                    (idx.iter().map(|&i| observed[i]).collect(), idx.iter().map(|&i| residual[i]).collect())
                } else {
                    (observed.clone(), residual)
                };
                let tree = fit_tree_rows(data, &rows, &y, &tp, &mut rng)?;
                let step = par::map_slice(&observed, |&r| tree.predict_point(&data.row(r)));
                for (f, s) in fitted.iter_mut().zip(step) {
                    *f += params.learning_rate * s;
                }
                trees.push(tree);
            }
            (init, trees)
        }
    };
    let mut model = ForestModel {
        format_version: FORMAT_VERSION,
        schema: data.schema().clone(),
        params: params.clone(),
        init,
        trees,
        training_mse_decrease: Vec::new(),
    };
    model.training_mse_decrease = model.variable_importance();
    Ok(model)
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Per-tree predictions for regression. In boosted mode tree `i`
    /// contributes `init + n * lr * t_i(x)`, so their mean is the ensemble
    /// prediction.
    pub fn tree_predictions(&self, row: &[f64]) -> Vec<f64> {
        self.tree_predictions_first(row, self.trees.len())
    }

    fn tree_predictions_first(&self, row: &[f64], n: usize) -> Vec<f64> {
        let trees = &self.trees[..n];
        match self.params.mode {
            ForestMode::Bagged => trees.iter().map(|t| t.predict_point(row)).collect(),
            ForestMode::Boosted => {
                let scale = n as f64 * self.params.learning_rate;
                trees.iter().map(|t| self.init + scale * t.predict_point(row)).collect()
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> Prediction {
        self.predict_first(row, self.trees.len())
    }

    /// Prediction using only the first `n` trees.
    pub fn predict_first(&self, row: &[f64], n: usize) -> Prediction {
        let n = n.clamp(1, self.trees.len());
        match self.params.task {
            Task::Regression => {
                let preds = self.tree_predictions_first(row, n);
                if preds.iter().all(|p| *p == preds[0]) {
                    return Prediction {
                        value: preds[0],
                        dispersion: 0.0,
                    };
                }
                let value = match self.params.mode {
                    ForestMode::Bagged => crate::stats::mean(&preds),
                    ForestMode::Boosted => {
                        self.init
                            + self.params.learning_rate
                                * self.trees[..n].iter().map(|t| t.predict_point(row)).sum::<f64>()
                    }
                };
                Prediction {
                    value,
                    dispersion: crate::stats::pop_std(&preds),
                }
            }
            Task::Classification { n_classes } => {
                let mut votes = vec![0.0; n_classes];
                for t in &self.trees[..n] {
                    votes[t.predict_point(row) as usize] += 1.0;
                }
                let win = argmax(&votes);
                Prediction {
                    value: win as f64,
                    dispersion: 1.0 - votes[win] / n as f64,
                }
            }
        }
    }

    fn check_schema(&self, data: &Dataset) -> Result<()> {
        if data.schema() != &self.schema {
            return Err(Error::SchemaMismatch(format!(
                "model expects {:?}, data has {:?}",
                self.schema.names(),
                data.schema().names()
            )));
        }
        Ok(())
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<Prediction>> {
        self.check_schema(data)?;
        Ok(par::map_range(data.n_rows(), |r| self.predict(&data.row(r))))
    }

    /// Point predictions after each of the tree counts in `stages`, as
    /// `out[stage][row]`.
    pub fn predict_staged(&self, data: &Dataset, stages: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_schema(data)?;
        if let Some(bad) = stages.iter().find(|&&s| s == 0 || s > self.trees.len()) {
            return Err(Error::invalid(format!("stage {bad} outside 1..={}", self.trees.len())));
        }
        let per_row = par::map_range(data.n_rows(), |r| {
            let row = data.row(r);
            stages.iter().map(|&s| self.predict_first(&row, s).value).collect::<Vec<_>>()
        });
        Ok((0..stages.len()).map(|k| per_row.iter().map(|v| v[k]).collect()).collect())
    }

    /// Split-gain importance averaged over trees, in schema order.
    pub fn variable_importance(&self) -> Vec<f64> {
        let p = self.schema.len();
        let mut acc = vec![0.0; p];
        for t in &self.trees {
            for (a, v) in acc.iter_mut().zip(t.importance(p)) {
                *a += v;
            }
        }
        let n = self.trees.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ForestModel = serde_json::from_str(text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported forest format version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
