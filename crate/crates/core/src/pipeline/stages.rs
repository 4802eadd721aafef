//! Individual pipeline stages. Each reads only the paths it is given and
//! writes only into its output location.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{ClassifySection, EvaluateSection, FeaturesSection, GapfillSection, TrainSection};
use crate::cwm::{build_training_set, read_training_csv, write_training_csv, CwmConfig, CwmRecords, TrainingSet};
use crate::error::{Error, Result};
use crate::gapfill::{gapfill_all, report_rows, CellSource, GapfillParams, GapfillReport, ImputedTable};
use crate::pft::{
    aggregate_abundance, classify_map, select_training_samples, train_classifier, AbundanceGrid, ConfusionMatrix,
    Shortfall,
};
use crate::raster::{
    build_features, load_stack, read_tsr, read_tsr_bands, write_tsr, write_tsr_bands, write_tsr_classes, BandRoles,
    FeatureRaster, Geometry, RasterGrid, DEFAULT_NODATA,
};
use crate::regress::{
    evaluate_method, fit_gpr_method, fit_method, robustness_curve, select_hyper, EvalReport, Hyper, Method, Protocol,
    RobustnessRow, TrainedModel,
};
use crate::seed::derive_seed;
use crate::trait_table::{
    drop_excluded_groups, load_trait_table, remove_outliers, ColumnSchema, LeafTrait, PftClass, TraitTable, N_BIO,
};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapfillStageReport {
    pub seed: u64,
    pub records_in: usize,
    pub dropped_records: usize,
    pub outliers_removed: usize,
    pub reports: Vec<GapfillReport>,
    /// Trait, ME, RMSE, R, samples, missing %, mean value.
    pub table_header: [String; 7],
    pub table: Vec<[String; 7]>,
}

/// Drop excluded growth forms, remove species outliers, then impute every
/// trait.
pub fn run_gapfill(table: &TraitTable, section: &GapfillSection, seed: u64) -> Result<(ImputedTable, GapfillStageReport)> {
    let excluded: BTreeSet<_> = section.exclude_forms.iter().copied().collect();
    let (kept, dropped) = drop_excluded_groups(table, &excluded);
    let (clean, removed) = remove_outliers(&kept, section.outlier_k);
    let params = GapfillParams {
        grid: section.grid.clone(),
        folds: section.folds,
        seed,
        min_node_size: section.min_node_size,
    };
    let (imputed, reports) = gapfill_all(&clean, &params)?;
    let rows = report_rows(&reports);
    Ok((
        imputed,
        GapfillStageReport {
            seed,
            records_in: table.len(),
            dropped_records: dropped,
            outliers_removed: removed.len(),
            reports,
            table_header: ["Trait", "ME", "RMSE", "R", "Samples", "Missing %", "Mean value"].map(String::from),
            table: rows,
        },
    ))
}

fn write_provenance(path: &Path, imputed: &ImputedTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["record_id".to_string()];
    header.extend(LeafTrait::ALL.iter().map(|t| t.column().to_string()));
    w.write_record(&header)?;
    for (r, prov) in imputed.table.records.iter().zip(&imputed.provenance) {
        let mut row = vec![r.record_id.clone()];
        row.extend(prov.iter().map(|p| {
            match p {
                CellSource::Observed => "observed",
                CellSource::Imputed => "imputed",
                CellSource::Missing => "missing",
            }
            .to_string()
        }));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read `input`, write the imputed table to `out`, the report to `report`
/// and per-cell provenance next to the table.
pub fn gapfill_files(input: &Path, out: &Path, report: &Path, section: &GapfillSection, seed: u64) -> Result<GapfillStageReport> {
    let table = load_trait_table(input, &ColumnSchema::default())?;
    let (imputed, rep) = run_gapfill(&table, section, seed)?;
    create_parent(out)?;
    create_parent(report)?;
    imputed.table.save(out)?;
    write_provenance(&out.with_extension("provenance.csv"), &imputed)?;
    write_json(report, &rep)?;
    Ok(rep)
}

/// Standalone feature job: one stack in, one feature directory out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesJob {
    pub stack: PathBuf,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub climate_dir: Option<PathBuf>,
    #[serde(default = "super::config::default_roles")]
    pub roles: BandRoles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub years: Option<(i32, i32)>,
}

impl FeaturesJob {
    /// Parse a job file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut job: FeaturesJob = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut job.stack, &mut job.out].into_iter().chain(job.elevation.iter_mut()).chain(job.climate_dir.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(job)
    }

    pub fn run(&self) -> Result<FeatureRaster> {
        let section = FeaturesSection {
            roles: self.roles.clone(),
            years: self.years,
        };
        let f = features_from_paths(&self.stack, self.elevation.as_deref(), self.climate_dir.as_deref(), &section)?;
        f.save(&self.out)?;
        Ok(f)
    }
}

/// `BIO1.tsr` .. `BIO19.tsr` from `dir`.
pub fn load_climate_dir(dir: &Path) -> Result<Vec<RasterGrid>> {
    (1..=N_BIO).map(|k| read_tsr(&dir.join(format!("BIO{k}.tsr")))).collect()
}

pub fn features_from_paths(
    stack_index: &Path,
    elevation: Option<&Path>,
    climate_dir: Option<&Path>,
    section: &FeaturesSection,
) -> Result<FeatureRaster> {
    let stack = load_stack(stack_index)?;
    let elevation = elevation.map(read_tsr).transpose()?;
    let climate = climate_dir.map(load_climate_dir).transpose()?.unwrap_or_default();
    build_features(&stack, &section.roles, section.years, elevation.as_ref(), &climate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub seed: u64,
    pub per_class: usize,
    pub threshold: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub shortfalls: Vec<Shortfall>,
    /// Row and column labels of `confusion`, in code order.
    pub classes: Vec<String>,
    /// `[reference][predicted]`.
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub kappa: Option<f64>,
    pub coarse_width: usize,
    pub coarse_height: usize,
    /// Share of each class in the fine map, in code order.
    pub class_shares: Vec<f64>,
}

pub fn run_classify(
    fine: &FeatureRaster,
    reference: &RasterGrid,
    quality: &RasterGrid,
    coarse: &Geometry,
    section: &ClassifySection,
    seed: u64,
) -> Result<(RasterGrid, AbundanceGrid, ClassifyReport)> {
    fine.geometry.ensure_same(&reference.geometry)?;
    let samples = select_training_samples(reference, quality, section.per_class, section.threshold, seed)?;
    let trained = train_classifier(fine, &samples, &section.classifier, seed)?;
    let classes = classify_map(&trained.model, fine)?;
    let abundance = aggregate_abundance(&classes, coarse)?;
    let valid = classes.valid_count().max(1) as f64;
    let class_shares = PftClass::ALL
        .iter()
        .map(|c| classes.values.iter().filter(|&&v| v == f64::from(c.code())).count() as f64 / valid)
        .collect();
    let report = ClassifyReport {
        seed,
        per_class: section.per_class,
        threshold: section.threshold,
        n_train: trained.n_train,
        n_validation: trained.n_validation,
        shortfalls: samples.shortfalls,
        classes: PftClass::ALL.iter().map(|c| c.label().to_string()).collect(),
        confusion: trained.validation.matrix.clone(),
        accuracy: trained.validation.overall_accuracy,
        kappa: trained.validation.kappa,
        coarse_width: coarse.width,
        coarse_height: coarse.height,
        class_shares,
    };
    Ok((classes, abundance, report))
}

pub fn write_abundance(path: &Path, abundance: &AbundanceGrid) -> Result<()> {
    write_tsr_bands(path, &abundance.to_bands())
}

pub fn read_abundance(path: &Path) -> Result<AbundanceGrid> {
    AbundanceGrid::from_bands(&read_tsr_bands(path)?)
}

/// Coarse grid sharing the fine grid's origin with `ratio` fine pixels per
/// coarse pixel along each axis.
pub fn coarse_geometry_for(fine: &Geometry, ratio: usize) -> Result<Geometry> {
    if ratio == 0 || !fine.width.is_multiple_of(ratio) || !fine.height.is_multiple_of(ratio) {
        return Err(Error::GeometryMismatch(format!(
            "{}x{} grid is not divisible by ratio {ratio}",
            fine.width, fine.height
        )));
    }
    Ok(Geometry::new(
        fine.width / ratio,
        fine.height / ratio,
        fine.origin_x,
        fine.origin_y,
        fine.pixel_size * ratio as f64,
        &fine.crs_tag,
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn classify_files(
    features_dir: &Path,
    reference: &Path,
    quality: &Path,
    coarse: &Geometry,
    out_classes: &Path,
    out_abundance: &Path,
    report: &Path,
    section: &ClassifySection,
    seed: u64,
) -> Result<ClassifyReport> {
    let fine = FeatureRaster::load(features_dir)?;
    let (classes, abundance, rep) = run_classify(&fine, &read_tsr(reference)?, &read_tsr(quality)?, coarse, section, seed)?;
    for p in [out_classes, out_abundance, report] {
        create_parent(p)?;
    }
    write_tsr_classes(out_classes, &classes, &PftClass::code_map())?;
    write_abundance(out_abundance, &abundance)?;
    write_json(report, &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwmSummary {
    pub config: CwmConfig,
    pub records_used: usize,
    pub records_skipped: usize,
    pub candidates: usize,
    pub rejected: usize,
    pub dropped_nodata: usize,
    pub samples: usize,
}

pub fn run_cwm(
    abundance: &AbundanceGrid,
    table: &TraitTable,
    features: &FeatureRaster,
    config: &CwmConfig,
) -> Result<(TrainingSet, CwmSummary)> {
    let records = CwmRecords::from_table(table);
    let set = build_training_set(abundance, features, &records, config)?;
    let summary = CwmSummary {
        config: *config,
        records_used: records.len(),
        records_skipped: records.skipped,
        candidates: set.n_candidates,
        rejected: set.n_rejected,
        dropped_nodata: set.n_dropped_nodata,
        samples: set.len(),
    };
    Ok((set, summary))
}

pub fn cwm_files(
    abundance: &Path,
    records: &Path,
    features_dir: &Path,
    out: &Path,
    config: &CwmConfig,
) -> Result<CwmSummary> {
    let table = load_trait_table(records, &ColumnSchema::default())?;
    let (set, summary) = run_cwm(&read_abundance(abundance)?, &table, &FeatureRaster::load(features_dir)?, config)?;
    create_parent(out)?;
    write_training_csv(out, &set)?;
    write_json(&out.with_extension("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(rename = "trait")]
    pub leaf_trait: LeafTrait,
    pub method: Method,
    pub seed: u64,
    /// Hyperparameters of the delivered model, tuned on all samples.
    pub hyper: Hyper,
    pub n: usize,
    pub evaluation: EvalReport,
    /// RF only: features by decreasing importance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<(String, f64)>>,
}

/// Pixel ids as sample keys.
pub fn sample_ids(set: &TrainingSet) -> Vec<u64> {
    set.samples.iter().map(|s| s.pixel_id as u64).collect()
}

pub fn trait_column(set: &TrainingSet, t: LeafTrait) -> Vec<f64> {
    set.y.column(t.index()).iter().copied().collect()
}

fn protocol(section: &TrainSection, seed: u64) -> Protocol {
    Protocol {
        train_fraction: section.train_fraction,
        realizations: section.realizations,
        seed,
    }
}

/// Evaluate `section.method` on one trait and fit the delivered model on
/// every sample.
pub fn train_trait(set: &TrainingSet, t: LeafTrait, section: &TrainSection, seed: u64) -> Result<(TrainedModel, TrainReport)> {
    let method = section.method;
    let y = trait_column(set, t);
    let ids = sample_ids(set);
    let names = &set.feature_names;
    let evaluation = evaluate_method(method, t.label(), &set.x, &y, &ids, names, &protocol(section, seed), &section.grids)?;
    let final_seed = derive_seed(seed, &[t.index() as u64]);
    let hyper = select_hyper(method, &set.x, &y, &ids, names, &section.grids, final_seed)?;
    let model = if method == Method::Gpr {
        fit_gpr_method(&set.x, &y, names, &section.grids.gpr, final_seed)?
    } else {
        fit_method(&set.x, &y, names, &hyper, final_seed)?
    };
    let report = TrainReport {
        leaf_trait: t,
        method,
        seed,
        hyper: model.hyper,
        n: y.len(),
        evaluation,
        importance: model.importance_ranking(),
    };
    Ok((model, report))
}

pub fn train_files(cwm_csv: &Path, t: LeafTrait, out_model: &Path, report: &Path, section: &TrainSection, seed: u64) -> Result<TrainReport> {
    let set = read_training_csv(cwm_csv)?;
    let (model, rep) = train_trait(&set, t, section, seed)?;
    create_parent(out_model)?;
    create_parent(report)?;
    model.save(out_model)?;
    write_json(report, &rep)?;
    Ok(rep)
}

/// Trait and standard-error rasters. Pixels with any nodata feature are
/// nodata in both; the standard error is nodata everywhere for methods
/// without one.
pub fn predict_raster(model: &TrainedModel, features: &FeatureRaster) -> Result<(RasterGrid, RasterGrid)> {
    let f = features.select(&model.feature_names)?;
    let n = f.geometry.n_pixels();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| f.pixel(i)).collect();
    let valid: Vec<usize> = (0..n).filter(|&i| rows[i].iter().all(|v| v.is_finite())).collect();
    let mut value = vec![DEFAULT_NODATA; n];
    let mut stderr = vec![DEFAULT_NODATA; n];
    if !valid.is_empty() {
        let x = DMatrix::from_fn(valid.len(), f.names.len(), |r, c| rows[valid[r]][c]);
        for (&i, (v, se)) in valid.iter().zip(model.predict_with_stderr(&x)?) {
            value[i] = v;
            if let Some(se) = se {
                stderr[i] = se;
            }
        }
    }
    let mut value = RasterGrid::new(f.geometry.clone(), value, DEFAULT_NODATA)?;
    let mut stderr = RasterGrid::new(f.geometry.clone(), stderr, DEFAULT_NODATA)?;
    value.band_id = "trait".into();
    stderr.band_id = "stderr".into();
    Ok((value, stderr))
}

pub fn predict_files(model: &Path, features_dir: &Path, out: &Path, stderr: &Path) -> Result<()> {
    let m = TrainedModel::load(model)?;
    let (v, se) = predict_raster(&m, &FeatureRaster::load(features_dir)?)?;
    create_parent(out)?;
    create_parent(stderr)?;
    write_tsr(out, &v)?;
    write_tsr(stderr, &se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    #[serde(rename = "trait")]
    pub leaf_trait: LeafTrait,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub robustness: Vec<RobustnessRow>,
}

/// Every listed method under the same protocol, plus robustness curves.
pub fn compare_methods(
    set: &TrainingSet,
    t: LeafTrait,
    train: &TrainSection,
    section: &EvaluateSection,
    seed: u64,
) -> Result<ComparisonReport> {
    let y = trait_column(set, t);
    let ids = sample_ids(set);
    let p = protocol(train, seed);
    let mut reports = Vec::with_capacity(section.methods.len());
    let mut robustness = Vec::new();
    for &m in &section.methods {
        reports.push(evaluate_method(m, t.label(), &set.x, &y, &ids, &set.feature_names, &p, &train.grids)?);
        if !section.robustness_fractions.is_empty() {
            robustness.extend(robustness_curve(
                m,
                &set.x,
                &y,
                &ids,
                &set.feature_names,
                &section.robustness_fractions,
                &p,
                &train.grids,
            )?);
        }
    }
    Ok(ComparisonReport {
        leaf_trait: t,
        seed,
        reports,
        robustness,
    })
}

pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "train_fraction", "n_train", "r_mean", "r_std", "rmse_mean", "rmse_std"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        w.write_record([
            r.method.label().to_string(),
            r.train_fraction.to_string(),
            r.n_train.to_string(),
            opt(r.r_mean),
            opt(r.r_std),
            r.rmse_mean.to_string(),
            r.rmse_std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
