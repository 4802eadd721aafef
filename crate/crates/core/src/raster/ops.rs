//! Per-pixel raster operations: compositing, spectral indices, annual
//! summaries, modal classes and bilinear resampling.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::grid::{Geometry, RasterGrid};
use crate::error::{Error, Result};
use crate::stats;

/// One acquisition of one band with its QA mask (1 usable, 0 not).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub date: NaiveDate,
    pub band_id: String,
    pub grid: RasterGrid,
    pub qa: RasterGrid,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeStack {
    pub scenes: Vec<Scene>,
}

impl TimeStack {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        if let Some(first) = scenes.first() {
            for s in &scenes {
                first.grid.geometry.ensure_same(&s.grid.geometry)?;
                s.grid.geometry.ensure_same(&s.qa.geometry)?;
            }
        }
        Ok(TimeStack { scenes })
    }

    pub fn geometry(&self) -> Option<&Geometry> {
        self.scenes.first().map(|s| &s.grid.geometry)
    }

    pub fn band_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.scenes.iter().map(|s| s.band_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::invalid(format!("bad date `{s}`: {e}")))
}

/// Per calendar month, the per-pixel median of QA-usable observations of
/// `band` in `years`. Pixels with no usable observation are nodata.
pub fn monthly_median_composite(
    stack: &TimeStack,
    band: &str,
    years: Option<RangeInclusive<i32>>,
) -> Result<Vec<RasterGrid>> {
    let scenes: Vec<&Scene> = stack
        .scenes
        .iter()
        .filter(|s| s.band_id == band && years.as_ref().is_none_or(|y| y.contains(&s.date.year())))
        .collect();
    let first = scenes
        .first()
        .ok_or_else(|| Error::InsufficientData(format!("no scenes for band `{band}`")))?;
    let geometry = first.grid.geometry.clone();
    for s in &scenes {
        geometry.ensure_same(&s.grid.geometry)?;
        geometry.ensure_same(&s.qa.geometry)?;
    }
    let nodata = first.grid.nodata;
    Ok((1..=12u32)
        .map(|month| {
            let in_month: Vec<&&Scene> = scenes.iter().filter(|s| s.date.month() == month).collect();
            let mut g = RasterGrid::from_fn(geometry.clone(), nodata, |i| {
                let vals: Vec<f64> = in_month
                    .iter()
                    .filter(|s| s.qa.values[i] == 1.0)
                    .filter_map(|s| s.grid.valid(i))
                    .collect();
                (!vals.is_empty()).then(|| stats::median(&vals))
            });
            g.band_id = band.to_string();
            g.timestamp = Some(format!("month-{month:02}"));
            g
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VegetationIndex {
    #[serde(rename = "NDVI")]
    Ndvi,
    #[serde(rename = "EVI")]
    Evi,
    #[serde(rename = "NDWI")]
    Ndwi,
}

impl VegetationIndex {
    pub const ALL: [VegetationIndex; 3] = [VegetationIndex::Ndvi, VegetationIndex::Evi, VegetationIndex::Ndwi];

    pub fn label(self) -> &'static str {
        match self {
            VegetationIndex::Ndvi => "NDVI",
            VegetationIndex::Evi => "EVI",
            VegetationIndex::Ndwi => "NDWI",
        }
    }
}

/// Denominators smaller than this in magnitude yield nodata.
pub const INDEX_DENOMINATOR_EPS: f64 = 1e-6;

/// Input reflectances for an index; only the bands the index needs are
/// required.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpectralBands<'a> {
    pub red: Option<&'a RasterGrid>,
    pub nir: Option<&'a RasterGrid>,
    pub blue: Option<&'a RasterGrid>,
    pub swir: Option<&'a RasterGrid>,
}

fn need<'a>(b: Option<&'a RasterGrid>, name: &str, which: VegetationIndex) -> Result<&'a RasterGrid> {
    b.ok_or_else(|| Error::invalid(format!("{} needs the {name} band", which.label())))
}

/// NDVI = (nir-red)/(nir+red); EVI = 2.5(nir-red)/(nir+6red-7.5blue+1);
/// NDWI = (nir-swir)/(nir+swir).
pub fn vegetation_index(bands: SpectralBands<'_>, which: VegetationIndex) -> Result<RasterGrid> {
    let nir = need(bands.nir, "nir", which)?;
    let inputs: Vec<&RasterGrid> = match which {
        VegetationIndex::Ndvi => vec![nir, need(bands.red, "red", which)?],
        VegetationIndex::Evi => vec![nir, need(bands.red, "red", which)?, need(bands.blue, "blue", which)?],
        VegetationIndex::Ndwi => vec![nir, need(bands.swir, "swir", which)?],
    };
    for g in &inputs {
        nir.geometry.ensure_same(&g.geometry)?;
    }
    let mut out = RasterGrid::from_fn(nir.geometry.clone(), nir.nodata, |i| {
        let v: Option<Vec<f64>> = inputs.iter().map(|g| g.valid(i)).collect();
        let v = v?;
        let (num, den) = match which {
            VegetationIndex::Ndvi | VegetationIndex::Ndwi => (v[0] - v[1], v[0] + v[1]),
            VegetationIndex::Evi => (2.5 * (v[0] - v[1]), v[0] + 6.0 * v[1] - 7.5 * v[2] + 1.0),
        };
        (den.abs() >= INDEX_DENOMINATOR_EPS).then(|| num / den)
    });
    out.band_id = which.label().to_string();
    out.timestamp = nir.timestamp.clone();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnualSummary {
    pub max: RasterGrid,
    pub min: RasterGrid,
    /// Population std; nodata with fewer than two valid months.
    pub std: RasterGrid,
    pub sum: RasterGrid,
}

/// Max, min, population std and sum over the valid months of each pixel.
pub fn annual_summary(monthlies: &[RasterGrid]) -> Result<AnnualSummary> {
    if monthlies.len() != 12 {
        return Err(Error::invalid(format!("expected 12 monthly grids, got {}", monthlies.len())));
    }
    let geometry = monthlies[0].geometry.clone();
    for m in monthlies {
        geometry.ensure_same(&m.geometry)?;
    }
    let nodata = monthlies[0].nodata;
    let per_pixel = crate::par::map_range(geometry.n_pixels(), |i| {
        let v: Vec<f64> = monthlies.iter().filter_map(|m| m.valid(i)).collect();
        if v.is_empty() {
            return [nodata; 4];
        }
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let std = if v.len() >= 2 { stats::pop_std(&v) } else { nodata };
        [max, min, std, v.iter().sum()]
    });
    let band = |k: usize| RasterGrid {
        geometry: geometry.clone(),
        values: per_pixel.iter().map(|p| p[k]).collect(),
        nodata,
        band_id: monthlies[0].band_id.clone(),
        timestamp: None,
    };
    Ok(AnnualSummary {
        max: band(0),
        min: band(1),
        std: band(2),
        sum: band(3),
    })
}

/// Per-pixel median over the valid values of several grids.
pub fn median_over(grids: &[RasterGrid]) -> Result<RasterGrid> {
    let first = grids.first().ok_or_else(|| Error::invalid("no grids"))?;
    for g in grids {
        first.geometry.ensure_same(&g.geometry)?;
    }
    let mut out = RasterGrid::from_fn(first.geometry.clone(), first.nodata, |i| {
        let v: Vec<f64> = grids.iter().filter_map(|g| g.valid(i)).collect();
        (!v.is_empty()).then(|| stats::median(&v))
    });
    out.band_id = first.band_id.clone();
    Ok(out)
}

/// Per-pixel modal class code over years; ties go to the lowest code and
/// nodata years are ignored.
pub fn mode_composite(yearly: &[RasterGrid]) -> Result<RasterGrid> {
    let first = yearly.first().ok_or_else(|| Error::invalid("no yearly class grids"))?;
    for g in yearly {
        first.geometry.ensure_same(&g.geometry)?;
    }
    let mut out = RasterGrid::from_fn(first.geometry.clone(), first.nodata, |i| {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for g in yearly {
            if let Some(v) = g.valid(i) {
                *counts.entry(v.round() as i64).or_default() += 1;
            }
        }
        let best = counts.values().copied().max()?;
        counts.iter().find(|(_, c)| **c == best).map(|(code, _)| *code as f64)
    });
    out.band_id = first.band_id.clone();
    Ok(out)
}

/// Bilinear interpolation of `src` at the pixel centers of `target`.
///
/// Sample positions between the outermost source centers and the source
/// edge are clamped to the nearest center row/column. A sample exactly on a
/// source center row/column uses only that row/column; any nodata among the
/// used corners gives nodata. Target
/// pixels outside the source extent are nodata.
pub fn bilinear_resample(src: &RasterGrid, target: &Geometry) -> Result<RasterGrid> {
    target.validate()?;
    let s = &src.geometry;
    let (sx0, sy0, sx1, sy1) = s.extent();
    let (tx0, ty0, tx1, ty1) = target.extent();
    if tx0 >= sx1 || tx1 <= sx0 || ty0 >= sy1 || ty1 <= sy0 {
        return Err(Error::GeometryMismatch("target does not overlap the source extent".into()));
    }
    let w = s.width;
    let axis = |f: f64, n: usize| -> (usize, usize, f64) {
        let f = f.clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let t = f - i0 as f64;
        if t == 0.0 || i0 + 1 >= n {
            (i0, i0, 0.0)
        } else {
            (i0, i0 + 1, t)
        }
    };
    let mut out = RasterGrid::from_fn(target.clone(), src.nodata, |i| {
        let (x, y) = target.center(i % target.width, i / target.width);
        if x < sx0 || x > sx1 || y < sy0 || y > sy1 {
            return None;
        }
        let (c0, c1, tc) = axis((x - s.origin_x) / s.pixel_size - 0.5, s.width);
        let (r0, r1, tr) = axis((s.origin_y - y) / s.pixel_size - 0.5, s.height);
        let v = |r: usize, c: usize| src.valid(r * w + c);
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let top = lerp(v(r0, c0)?, v(r0, c1)?, tc);
        let bottom = lerp(v(r1, c0)?, v(r1, c1)?, tc);
        Some(lerp(top, bottom, tr))
    });
    out.band_id = src.band_id.clone();
    out.timestamp = src.timestamp.clone();
    Ok(out)
}
