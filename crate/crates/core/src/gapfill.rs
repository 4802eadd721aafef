//! Per-trait imputation of the trait table with boosted surrogate forests,
//! tuned by k-fold cross-validation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{fit_forest, Column, ColumnKind, Dataset, FeatureSchema, ForestParams, DEFAULT_MIN_NODE_SIZE};
use crate::par;
use crate::seed::{derive_seed, keyed_hash, stream};
use crate::stats::{self, compute_metrics, Metrics};
use crate::trait_table::{LeafTrait, TraitTable, N_BIO, N_TRAITS};

/// Imputation order: descending data availability.
pub const IMPUTATION_ORDER: [LeafTrait; N_TRAITS] =
    [LeafTrait::Sla, LeafTrait::Ldmc, LeafTrait::Lnc, LeafTrait::Lpc, LeafTrait::Lnpr];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    pub n_trees: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub max_splits: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            n_trees: vec![50, 100, 200],
            learning_rate: vec![0.05, 0.1, 0.3],
            max_splits: vec![15, 63, 255],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees.is_empty() || self.learning_rate.is_empty() || self.max_splits.is_empty() {
            return Err(Error::Config("hyperparameter grid has an empty axis".into()));
        }
        if self.n_trees.contains(&0) {
            return Err(Error::Config("grid n_trees must be >= 1".into()));
        }
        if let Some(lr) = self.learning_rate.iter().find(|lr| !(**lr > 0.0 && **lr <= 1.0)) {
            return Err(Error::Config(format!("grid learning_rate {lr} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapfillParams {
    pub grid: HyperGrid,
    pub folds: usize,
    pub seed: u64,
    #[serde(default = "default_min_node")]
    pub min_node_size: usize,
}

fn default_min_node() -> usize {
    DEFAULT_MIN_NODE_SIZE
}

impl Default for GapfillParams {
    fn default() -> Self {
        GapfillParams {
            grid: HyperGrid::default(),
            folds: 10,
            seed: 0,
            min_node_size: DEFAULT_MIN_NODE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChosenParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_splits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: ChosenParams,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapfillReport {
    #[serde(rename = "trait")]
    pub leaf_trait: LeafTrait,
    pub me: f64,
    pub rmse: f64,
    pub r: Option<f64>,
    /// Observed values of the trait.
    pub n_samples: usize,
    /// Missing share before imputation.
    pub missing_fraction: f64,
    /// Mean of the observed values.
    pub mean_value: f64,
    pub chosen_params: ChosenParams,
    /// CV metrics of every grid point.
    pub grid: Vec<GridScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellSource {
    Observed,
    Imputed,
    Missing,
}

/// Trait table with per-cell provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedTable {
    pub table: TraitTable,
    pub provenance: Vec<[CellSource; N_TRAITS]>,
}

impl ImputedTable {
    pub fn from_table(table: TraitTable) -> Self {
        let provenance = table
            .records
            .iter()
            .map(|r| r.traits.map(|v| if v.is_some() { CellSource::Observed } else { CellSource::Missing }))
            .collect();
        ImputedTable { table, provenance }
    }
}

/// Categorical level codes from sorted distinct strings, so encodings do not
/// depend on record order.
fn encode_levels<'a>(values: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, u32> {
    let mut m: BTreeMap<&str, u32> = values.map(|v| (v, 0)).collect();
    for (i, v) in m.values_mut().enumerate() {
        *v = i as u32;
    }
    m
}

/// Predictor matrix for imputing `target`: taxonomy, categorical traits,
/// BIO1..BIO19 and the other four traits (missing stays NaN).
pub fn predictor_dataset(table: &TraitTable, target: LeafTrait) -> Result<Dataset> {
    let recs = &table.records;
    let mut columns = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (name, get) in [
        ("species", (|r: &crate::trait_table::TraitRecord| r.species.as_str()) as fn(&_) -> &str),
        ("genus", |r| r.genus.as_str()),
        ("family", |r| r.family.as_str()),
    ] {
        let levels = encode_levels(recs.iter().map(get));
        columns.push(Column {
            name: name.into(),
            kind: ColumnKind::Categorical {
                levels: levels.len() as u32,
            },
        });
        cols.push(recs.iter().map(|r| f64::from(levels[get(r)])).collect());
    }
    let cat = |name: &str, levels: u32| Column {
        name: name.into(),
        kind: ColumnKind::Categorical { levels },
    };
    columns.push(cat("growth_form", 6));
    cols.push(recs.iter().map(|r| f64::from(r.growth_form as u32)).collect());
    columns.push(cat("leaf_type", 3));
    cols.push(recs.iter().map(|r| f64::from(r.leaf_type as u32)).collect());
    columns.push(cat("leaf_phenology", 3));
    cols.push(recs.iter().map(|r| f64::from(r.leaf_phenology as u32)).collect());
    for k in 0..N_BIO {
        columns.push(Column {
            name: format!("bio{}", k + 1),
            kind: ColumnKind::Numeric,
        });
        cols.push(recs.iter().map(|r| r.climate[k].unwrap_or(f64::NAN)).collect());
    }
    for t in LeafTrait::ALL {
        if t == target {
            continue;
        }
        columns.push(Column {
            name: t.column().into(),
            kind: ColumnKind::Numeric,
        });
        cols.push(recs.iter().map(|r| r.traits[t.index()].unwrap_or(f64::NAN)).collect());
    }
    Dataset::from_columns(FeatureSchema { columns }, cols)
}

fn fold_of(record_id: &str, fold_seed: u64, folds: usize) -> usize {
    (keyed_hash(fold_seed, record_id.as_bytes()) % folds as u64) as usize
}

/// Cross-validate the grid for one trait, refit the best setting on all
/// observed cells and fill the missing ones. Observed cells are untouched.
pub fn gapfill_trait(
    input: &ImputedTable,
    target: LeafTrait,
    params: &GapfillParams,
) -> Result<(ImputedTable, GapfillReport)> {
    params.grid.validate()?;
    if params.folds < 2 {
        return Err(Error::Config("folds must be >= 2".into()));
    }
    let ti = target.index();
    let recs = &input.table.records;
    let n = recs.len();

    // canonical row order by record_id keeps every result independent of
    // the input ordering
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| recs[a].record_id.cmp(&recs[b].record_id));
    let canonical = TraitTable {
        records: order.iter().map(|&i| recs[i].clone()).collect(),
        schema: input.table.schema.clone(),
    };
    let data = predictor_dataset(&canonical, target)?;
    let y: Vec<f64> = canonical.records.iter().map(|r| r.traits[ti].unwrap_or(f64::NAN)).collect();
    let observed: Vec<usize> = (0..n).filter(|&i| y[i].is_finite()).collect();
    if observed.len() < 2 * params.folds {
        return Err(Error::InsufficientData(format!(
            "{target}: {} observed values, need at least {}",
            observed.len(),
            2 * params.folds
        )));
    }
    let fold_seed = derive_seed(params.seed, &[stream::FOLD, ti as u64]);
    let fold: Vec<usize> = canonical
        .records
        .iter()
        .map(|r| fold_of(&r.record_id, fold_seed, params.folds))
        .collect();

    let grid = &params.grid;
    let max_trees = *grid.n_trees.iter().max().expect("validated non-empty");
    let mut stages = grid.n_trees.clone();
    stages.sort_unstable();
    stages.dedup();
    let pairs: Vec<(f64, usize)> = grid
        .learning_rate
        .iter()
        .flat_map(|&lr| grid.max_splits.iter().map(move |&ms| (lr, ms)))
        .collect();
    let forest_params = |lr: f64, ms: usize, trees: usize| ForestParams {
        min_node_size: params.min_node_size,
        ..ForestParams::boosted_regression(trees, lr, ms)
    };

    // one unit per (lr, max_splits, fold): fit at the largest tree count and
    // read off every smaller count from the staged predictions
    let units = pairs.len() * params.folds;
    let results = par::try_map_range(units, |u| -> Result<Option<(Vec<usize>, Vec<Vec<f64>>)>> {
        let (pi, f) = (u / params.folds, u % params.folds);
        let (lr, ms) = pairs[pi];
        let test: Vec<usize> = observed.iter().copied().filter(|&i| fold[i] == f).collect();
        if test.is_empty() {
            return Ok(None);
        }
        let yt: Vec<f64> = (0..n).map(|i| if fold[i] == f { f64::NAN } else { y[i] }).collect();
        let seed = derive_seed(params.seed, &[stream::TREE, ti as u64, f as u64]);
        let model = fit_forest(&data, &yt, &forest_params(lr, ms, max_trees), seed)?;
        let staged = model.predict_staged(&data.select_rows(&test), &stages)?;
        Ok(Some((test, staged)))
    })?;

    let mut scores = Vec::new();
    for (pi, &(lr, ms)) in pairs.iter().enumerate() {
        for (si, &nt) in stages.iter().enumerate() {
            let mut pred = Vec::with_capacity(observed.len());
            let mut obs = Vec::with_capacity(observed.len());
            for f in 0..params.folds {
                if let Some((test, staged)) = &results[pi * params.folds + f] {
                    pred.extend_from_slice(&staged[si]);
                    obs.extend(test.iter().map(|&i| y[i]));
                }
            }
            scores.push(GridScore {
                params: ChosenParams {
                    n_trees: nt,
                    learning_rate: lr,
                    max_splits: ms,
                },
                metrics: compute_metrics(&pred, &obs)?,
            });
        }
    }
    let best = scores
        .iter()
        .min_by(|a, b| a.metrics.rmse.total_cmp(&b.metrics.rmse))
        .expect("non-empty grid")
        .clone();

    let cp = best.params;
    let refit_seed = derive_seed(params.seed, &[stream::TREE, ti as u64, u64::MAX]);
    let model = fit_forest(&data, &y, &forest_params(cp.learning_rate, cp.max_splits, cp.n_trees), refit_seed)?;
    let missing: Vec<usize> = (0..n).filter(|&i| !y[i].is_finite()).collect();
    let filled = model.predict_dataset(&data.select_rows(&missing))?;

    let mut out = input.clone();
    for (&ci, p) in missing.iter().zip(&filled) {
        let orig = order[ci];
        out.table.records[orig].traits[ti] = Some(p.value);
        out.provenance[orig][ti] = CellSource::Imputed;
    }
    let obs_values: Vec<f64> = observed.iter().map(|&i| y[i]).collect();
    let report = GapfillReport {
        leaf_trait: target,
        me: best.metrics.me,
        rmse: best.metrics.rmse,
        r: best.metrics.r,
        n_samples: observed.len(),
        missing_fraction: missing.len() as f64 / n as f64,
        mean_value: stats::mean(&obs_values),
        chosen_params: cp,
        grid: scores,
    };
    Ok((out, report))
}

/// Impute all five traits in [`IMPUTATION_ORDER`]; later traits use the
/// already imputed columns as predictors.
pub fn gapfill_all(table: &TraitTable, params: &GapfillParams) -> Result<(ImputedTable, Vec<GapfillReport>)> {
    let mut current = ImputedTable::from_table(table.clone());
    let mut reports = Vec::with_capacity(N_TRAITS);
    for t in IMPUTATION_ORDER {
        let (next, report) = gapfill_trait(&current, t, params)?;
        current = next;
        reports.push(report);
    }
    Ok((current, reports))
}

/// Table-style summary rows: trait, ME, RMSE, R, samples, missing %, mean.
pub fn report_rows(reports: &[GapfillReport]) -> Vec<[String; 7]> {
    reports
        .iter()
        .map(|r| {
            [
                r.leaf_trait.label().to_string(),
                format!("{:.4}", r.me),
                format!("{:.4}", r.rmse),
                r.r.map_or_else(|| "NA".into(), |v| format!("{v:.4}")),
                r.n_samples.to_string(),
                format!("{:.1}", 100.0 * r.missing_fraction),
                format!("{:.4}", r.mean_value),
            ]
        })
        .collect()
}
