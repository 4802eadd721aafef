//! Plot-ready tables from a finished run: scatter pairs, residual
//! quantiles per dominant PFT, latitudinal profiles and robustness curves.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ReportSection;
use super::run::RunLayout;
use super::stages::{read_json, ClassifyReport, GapfillStageReport, TrainReport};
use crate::cwm::read_training_csv;
use crate::error::{Error, Result};
use crate::raster::read_tsr;
use crate::regress::{dominant_pft, latitudinal_profile, residuals_by_pft, LatBin, ResidualGroup};
use crate::trait_table::{LeafTrait, N_PFT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitSummary {
    #[serde(rename = "trait")]
    pub leaf_trait: LeafTrait,
    pub method: String,
    pub n: usize,
    pub n_test: usize,
    pub me_mean: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub r_mean: Option<f64>,
    pub r_std: Option<f64>,
    pub residual_groups: Vec<ResidualGroup>,
    pub latitude_bins: usize,
    /// Up to ten most important features (RF only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_features: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub traits: Vec<TraitSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_kappa: Option<f64>,
    /// Gap-fill summary rows when the run imputed its own table.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gapfill: Vec<[String; 7]>,
}

fn need(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InsufficientData(format!(
            "incomplete run directory: {} is missing",
            path.display()
        )))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Valid pixel values of a raster with their center latitudes.
fn raster_latitudes(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = read_tsr(path)?;
    let mut values = Vec::new();
    let mut lats = Vec::new();
    for i in 0..g.values.len() {
        if let Some(v) = g.valid(i) {
            values.push(v);
            lats.push(g.geometry.center(i % g.geometry.width, i / g.geometry.width).1);
        }
    }
    Ok((values, lats))
}

/// Write the plot-data files for `traits` into `run_dir/report` and return
/// the summary that is also saved as `summary.json`.
pub fn emit_report(run_dir: &Path, traits: &[LeafTrait], section: &ReportSection) -> Result<ReportSummary> {
    let layout = RunLayout::new(run_dir);
    need(&layout.cwm())?;
    for &t in traits {
        need(&layout.train_report(t))?;
        need(&layout.trait_map(t))?;
    }
    let out = layout.report_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let set = read_training_csv(&layout.cwm())?;
    let by_pixel: BTreeMap<u64, (f64, f64, [f64; N_PFT])> = set
        .samples
        .iter()
        .map(|s| (s.pixel_id as u64, (s.center_lat, s.center_lon, s.abundance)))
        .collect();

    let mut summaries = Vec::with_capacity(traits.len());
    for &t in traits {
        let rep: TrainReport = read_json(&layout.train_report(t))?;
        let scatter = &rep.evaluation.scatter;
        let mut pred = Vec::with_capacity(scatter.len());
        let mut obs = Vec::with_capacity(scatter.len());
        let mut dom = Vec::with_capacity(scatter.len());
        let path = out.join(format!("scatter_{}.csv", t.column()));
        let mut w = csv_writer(&path)?;
        w.write_record(["pixel_id", "lat", "lon", "dominant_pft", "observed", "predicted", "residual"])?;
        for p in scatter {
            let &(lat, lon, ab) = by_pixel.get(&p.id).ok_or_else(|| {
                Error::InsufficientData(format!("scatter pixel {} is not in the CWM table", p.id))
            })?;
            let d = dominant_pft(&ab);
            w.write_record([
                p.id.to_string(),
                lat.to_string(),
                lon.to_string(),
                d.label().to_string(),
                p.observed.to_string(),
                p.predicted.to_string(),
                (p.predicted - p.observed).to_string(),
            ])?;
            pred.push(p.predicted);
            obs.push(p.observed);
            dom.push(d);
        }
        finish(w, &path)?;

        let groups = residuals_by_pft(&pred, &obs, &dom)?;
        let path = out.join(format!("residuals_{}.csv", t.column()));
        let mut w = csv_writer(&path)?;
        w.write_record(["pft", "n", "me", "rmse", "q25", "q50", "q75"])?;
        for g in &groups {
            w.write_record([
                g.pft.label().to_string(),
                g.n.to_string(),
                g.me.to_string(),
                g.rmse.to_string(),
                g.q25.to_string(),
                g.q50.to_string(),
                g.q75.to_string(),
            ])?;
        }
        finish(w, &path)?;

        let (values, lats) = raster_latitudes(&layout.trait_map(t))?;
        let bins: Vec<LatBin> = latitudinal_profile(&values, &lats, section.lat_bin_deg)?;
        let path = out.join(format!("latitudinal_{}.csv", t.column()));
        let mut w = csv_writer(&path)?;
        w.write_record(["lat_min", "lat_max", "mean", "count"])?;
        for b in &bins {
            w.write_record([b.lat_min.to_string(), b.lat_max.to_string(), b.mean.to_string(), b.count.to_string()])?;
        }
        finish(w, &path)?;

        let robustness = layout.robustness(t);
        if robustness.exists() {
            let dest = out.join(format!("robustness_{}.csv", t.column()));
            std::fs::copy(&robustness, &dest).map_err(|e| Error::io(&dest, e))?;
        }

        let ev = &rep.evaluation;
        summaries.push(TraitSummary {
            leaf_trait: t,
            method: rep.method.label().to_string(),
            n: ev.n,
            n_test: scatter.len(),
            me_mean: ev.me_mean,
            rmse_mean: ev.rmse_mean,
            rmse_std: ev.rmse_std,
            r_mean: ev.r_mean,
            r_std: ev.r_std,
            residual_groups: groups,
            latitude_bins: bins.len(),
            top_features: rep.importance.map(|v| v.into_iter().take(10).collect()).unwrap_or_default(),
        });
    }

    let classify: Option<ClassifyReport> = layout
        .classify_report()
        .exists()
        .then(|| read_json(&layout.classify_report()))
        .transpose()?;
    let gapfill: Option<GapfillStageReport> = layout
        .gapfill_report()
        .exists()
        .then(|| read_json(&layout.gapfill_report()))
        .transpose()?;
    let summary = ReportSummary {
        traits: summaries,
        classification_accuracy: classify.as_ref().map(|c| c.accuracy),
        classification_kappa: classify.and_then(|c| c.kappa),
        gapfill: gapfill.map(|g| g.table).unwrap_or_default(),
    };
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
