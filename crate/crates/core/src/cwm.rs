//! Community-weighted-mean trait values for coarse pixels near in-situ
//! records.
//!
//! Raster map coordinates are read as geographic degrees: `x` is longitude
//! and `y` is latitude.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::pft::AbundanceGrid;
use crate::raster::FeatureRaster;
use crate::stats;
use crate::trait_table::{species_to_pft, LeafTrait, PftClass, TraitTable, N_PFT, N_TRAITS};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;
pub const DEFAULT_MAX_KM: f64 = 100.0;
pub const DEFAULT_NEIGHBORS: usize = 10;
pub const DEFAULT_MIN_REPRESENTED: f64 = 0.5;

/// Slack added to the bounding prefilter so it never drops a record the
/// exact distance would keep.
const PREFILTER_MARGIN_DEG: f64 = 1e-6;

/// Great-circle distance in km between two `(lat, lon)` points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwmConfig {
    pub max_km: f64,
    pub k: usize,
    /// Pixels need strictly more than this represented fraction.
    pub min_represented: f64,
}

impl Default for CwmConfig {
    fn default() -> Self {
        CwmConfig {
            max_km: DEFAULT_MAX_KM,
            k: DEFAULT_NEIGHBORS,
            min_represented: DEFAULT_MIN_REPRESENTED,
        }
    }
}

impl CwmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_km.is_finite() && self.max_km > 0.0) {
            return Err(Error::Config(format!("max_km must be positive, got {}", self.max_km)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_represented) {
            return Err(Error::Config(format!(
                "min_represented must be in [0, 1), got {}",
                self.min_represented
            )));
        }
        Ok(())
    }
}

/// A georeferenced record with a PFT and all five trait values.
#[derive(Debug, Clone, PartialEq)]
pub struct CwmRecord {
    pub record_id: String,
    pub pft: PftClass,
    pub lat: f64,
    pub lon: f64,
    pub traits: [f64; N_TRAITS],
}

/// Records grouped by PFT and sorted by latitude for bounding-box search.
#[derive(Debug, Clone)]
pub struct CwmRecords {
    by_pft: Vec<Vec<CwmRecord>>,
    /// Records without coordinates, PFT or a complete trait vector.
    pub skipped: usize,
}

impl Default for CwmRecords {
    fn default() -> Self {
        CwmRecords::from_records(Vec::new())
    }
}

impl CwmRecords {
    pub fn from_records(records: Vec<CwmRecord>) -> Self {
        let mut by_pft = vec![Vec::new(); N_PFT];
        for r in records {
            by_pft[r.pft.index()].push(r);
        }
        for v in &mut by_pft {
            v.sort_by(|a, b| a.lat.total_cmp(&b.lat).then_with(|| a.record_id.cmp(&b.record_id)));
        }
        CwmRecords { by_pft, skipped: 0 }
    }

    pub fn from_table(table: &TraitTable) -> Self {
        let mut kept = Vec::new();
        let mut skipped = 0;
        for r in &table.records {
            let traits: Option<Vec<f64>> = r.traits.iter().copied().collect();
            match (r.coordinates(), species_to_pft(r), traits) {
                (Some((lat, lon)), Some(pft), Some(t)) => kept.push(CwmRecord {
                    record_id: r.record_id.clone(),
                    pft,
                    lat,
                    lon,
                    traits: t.try_into().expect("trait vector length"),
                }),
                _ => skipped += 1,
            }
        }
        let mut out = CwmRecords::from_records(kept);
        out.skipped = skipped;
        out
    }

    pub fn len(&self) -> usize {
        self.by_pft.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self, pft: PftClass) -> &[CwmRecord] {
        &self.by_pft[pft.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub record_id: String,
    pub distance_km: f64,
}

fn lon_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Records of `pft` within `max_km` of `center`, nearest first, at most `k`.
/// Equal distances are ordered by record id.
pub fn neighbor_select(
    center: (f64, f64),
    records: &CwmRecords,
    pft: PftClass,
    max_km: f64,
    k: usize,
) -> Vec<(&CwmRecord, f64)> {
    let pool = records.records(pft);
    let ang = max_km / EARTH_RADIUS_KM;
    let dlat = ang.to_degrees() + PREFILTER_MARGIN_DEG;
    let lo = pool.partition_point(|r| r.lat < center.0 - dlat);
    let hi = pool.partition_point(|r| r.lat <= center.0 + dlat);
    let dlon = if center.0.abs() + dlat >= 90.0 || ang >= std::f64::consts::FRAC_PI_2 {
        None
    } else {
        let s = ang.sin() / center.0.to_radians().cos();
        (s < 1.0).then(|| s.asin().to_degrees() + PREFILTER_MARGIN_DEG)
    };
    let mut hits: Vec<(&CwmRecord, f64)> = pool[lo..hi]
        .iter()
        .filter(|r| dlon.is_none_or(|w| lon_gap(r.lon, center.1) <= w))
        .map(|r| (r, haversine_km(center, (r.lat, r.lon))))
        .filter(|(_, d)| *d <= max_km)
        .collect();
    hits.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.record_id.cmp(&b.0.record_id)));
    hits.truncate(k);
    hits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PftContribution {
    pub pft: PftClass,
    pub neighbors: Vec<Neighbor>,
    pub trait_means: [f64; N_TRAITS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwmSample {
    pub pixel_id: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    pub abundance: [f64; N_PFT],
    pub trait_values: [f64; N_TRAITS],
    pub represented_fraction: f64,
    /// Empty when the sample was read back from CSV.
    pub contributing_records: Vec<PftContribution>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CwmOutcome {
    Accepted(CwmSample),
    Rejected { pixel_id: usize, represented_fraction: f64 },
}

impl CwmOutcome {
    pub fn accepted(self) -> Option<CwmSample> {
        match self {
            CwmOutcome::Accepted(s) => Some(s),
            CwmOutcome::Rejected { .. } => None,
        }
    }
}

/// CWM of one coarse pixel from its abundance vector and nearby records.
pub fn pixel_cwm(
    pixel_id: usize,
    center: (f64, f64),
    abundance: &[f64; N_PFT],
    records: &CwmRecords,
    config: &CwmConfig,
) -> Result<CwmOutcome> {
    if abundance.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::invalid(format!("pixel {pixel_id}: abundance must be finite and non-negative")));
    }
    let mut vegetated = 0.0;
    let mut represented = 0.0;
    let mut weighted = [0.0; N_TRAITS];
    let mut contributing = Vec::new();
    for pft in PftClass::VEGETATED {
        let a = abundance[pft.index()];
        vegetated += a;
        if a <= 0.0 {
            continue;
        }
        let hits = neighbor_select(center, records, pft, config.max_km, config.k);
        if hits.is_empty() {
            continue;
        }
        let mut means = [0.0; N_TRAITS];
        for t in LeafTrait::ALL {
            let v: Vec<f64> = hits.iter().map(|(r, _)| r.traits[t.index()]).collect();
            means[t.index()] = stats::mean(&v);
            weighted[t.index()] += a * means[t.index()];
        }
        represented += a;
        contributing.push(PftContribution {
            pft,
            neighbors: hits
                .iter()
                .map(|(r, d)| Neighbor {
                    record_id: r.record_id.clone(),
                    distance_km: *d,
                })
                .collect(),
            trait_means: means,
        });
    }
    let represented_fraction = if vegetated > 0.0 { represented / vegetated } else { 0.0 };
    if represented_fraction <= config.min_represented || represented == 0.0 {
        return Ok(CwmOutcome::Rejected {
            pixel_id,
            represented_fraction,
        });
    }
    Ok(CwmOutcome::Accepted(CwmSample {
        pixel_id,
        center_lat: center.0,
        center_lon: center.1,
        abundance: *abundance,
        trait_values: weighted.map(|w| w / represented),
        represented_fraction,
        contributing_records: contributing,
    }))
}

/// Accepted pixels joined with their feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub feature_names: Vec<String>,
    pub samples: Vec<CwmSample>,
    /// Samples by features.
    pub x: DMatrix<f64>,
    /// Samples by the five traits.
    pub y: DMatrix<f64>,
    pub n_candidates: usize,
    pub n_rejected: usize,
    pub n_dropped_nodata: usize,
}

impl TrainingSet {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    fn assemble(feature_names: Vec<String>, rows: Vec<(CwmSample, Vec<f64>)>) -> Self {
        let p = feature_names.len();
        let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i].1[j]);
        let y = DMatrix::from_fn(rows.len(), N_TRAITS, |i, j| rows[i].0.trait_values[j]);
        TrainingSet {
            feature_names,
            samples: rows.into_iter().map(|r| r.0).collect(),
            x,
            y,
            n_candidates: 0,
            n_rejected: 0,
            n_dropped_nodata: 0,
        }
    }
}

/// Center of pixel `i` as `(lat, lon)`.
pub fn pixel_center(geometry: &crate::raster::Geometry, i: usize) -> (f64, f64) {
    let (x, y) = geometry.center(i % geometry.width, i / geometry.width);
    (y, x)
}

/// One row per accepted pixel whose feature vector has no nodata.
pub fn build_training_set(
    abundance: &AbundanceGrid,
    features: &FeatureRaster,
    records: &CwmRecords,
    config: &CwmConfig,
) -> Result<TrainingSet> {
    config.validate()?;
    abundance.geometry.ensure_same(&features.geometry)?;
    let geometry = &abundance.geometry;
    let outcomes = par::try_map_range(geometry.n_pixels(), |i| {
        abundance.fractions[i]
            .map(|f| pixel_cwm(i, pixel_center(geometry, i), &f, records, config))
            .transpose()
    })?;
    let n_candidates = outcomes.iter().filter(|o| o.is_some()).count();
    let mut n_rejected = 0;
    let mut n_dropped_nodata = 0;
    let mut rows = Vec::new();
    for o in outcomes.into_iter().flatten() {
        let Some(s) = o.accepted() else {
            n_rejected += 1;
            continue;
        };
        let f = features.pixel(s.pixel_id);
        if f.iter().any(|v| !v.is_finite()) {
            n_dropped_nodata += 1;
            continue;
        }
        rows.push((s, f));
    }
    let mut set = TrainingSet::assemble(features.names.clone(), rows);
    set.n_candidates = n_candidates;
    set.n_rejected = n_rejected;
    set.n_dropped_nodata = n_dropped_nodata;
    Ok(set)
}

fn fixed_header() -> Vec<String> {
    let mut h: Vec<String> = vec!["pixel_id".into(), "lat".into(), "lon".into()];
    h.extend(PftClass::ALL.iter().map(|c| c.label().to_string()));
    h.push("represented_fraction".into());
    h.extend(LeafTrait::ALL.iter().map(|t| t.label().to_string()));
    h
}

pub fn write_training_csv(path: &Path, set: &TrainingSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = fixed_header();
    header.extend(set.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, s) in set.samples.iter().enumerate() {
        let mut row = vec![s.pixel_id.to_string(), s.center_lat.to_string(), s.center_lon.to_string()];
        row.extend(s.abundance.iter().map(f64::to_string));
        row.push(s.represented_fraction.to_string());
        row.extend(s.trait_values.iter().map(f64::to_string));
        row.extend(set.x.row(i).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_training_csv(path: &Path) -> Result<TrainingSet> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let fixed = fixed_header();
    if header.len() < fixed.len() || header[..fixed.len()] != fixed[..] {
        return Err(Error::SchemaMismatch(format!(
            "{} does not start with the CWM columns",
            path.display()
        )));
    }
    let feature_names = header[fixed.len()..].to_vec();
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = n + 1;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::BadRow {
                    row,
                    message: format!("column `{}` is not a number", header[j]),
                })
        };
        let pixel_id = rec.get(0).and_then(|v| v.trim().parse::<usize>().ok()).ok_or(Error::BadRow {
            row,
            message: "pixel_id is not an index".into(),
        })?;
        let mut abundance = [0.0; N_PFT];
        for (k, a) in abundance.iter_mut().enumerate() {
            *a = num(3 + k)?;
        }
        let mut trait_values = [0.0; N_TRAITS];
        for (k, t) in trait_values.iter_mut().enumerate() {
            *t = num(4 + N_PFT + k)?;
        }
        let feats = (fixed.len()..header.len()).map(num).collect::<Result<Vec<_>>>()?;
        rows.push((
            CwmSample {
                pixel_id,
                center_lat: num(1)?,
                center_lon: num(2)?,
                abundance,
                trait_values,
                represented_fraction: num(3 + N_PFT)?,
                contributing_records: Vec::new(),
            },
            feats,
        ));
    }
    Ok(TrainingSet::assemble(feature_names, rows))
}
