//! Annual summary feature stacks and feature standardization.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::grid::{read_tsr, write_tsr, Geometry, RasterGrid};
use super::ops::{
    annual_summary, bilinear_resample, median_over, monthly_median_composite, parse_date, vegetation_index, Scene,
    SpectralBands, TimeStack, VegetationIndex,
};
use crate::error::{Error, Result};
use crate::trait_table::N_BIO;

/// Which stack bands play which spectral role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandRoles {
    /// Reflectance bands summarized as `<band>med`, in output order.
    pub reflectance: Vec<String>,
    pub red: String,
    pub nir: String,
    pub blue: String,
    pub swir: String,
    /// Land-surface temperature band, if the stack has one.
    #[serde(default)]
    pub lst: Option<String>,
}

/// Output band names in feature order.
pub fn feature_band_names(roles: &BandRoles, elevation: bool, climate: bool) -> Vec<String> {
    let mut names: Vec<String> = roles.reflectance.iter().map(|b| format!("{b}med")).collect();
    if roles.lst.is_some() {
        names.push("LSTmed".into());
    }
    for vi in VegetationIndex::ALL {
        for s in ["max", "min", "std", "sum"] {
            names.push(format!("{}{s}", vi.label()));
        }
    }
    if roles.lst.is_some() {
        for s in ["max", "min", "std", "sum"] {
            names.push(format!("LST{s}"));
        }
    }
    if elevation {
        names.push("Elevation".into());
    }
    if climate {
        names.extend((1..=N_BIO).map(|i| format!("BIO{i}")));
    }
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRaster {
    pub geometry: Geometry,
    pub names: Vec<String>,
    pub bands: Vec<RasterGrid>,
    pub lst_supplied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureIndex {
    geometry: Geometry,
    bands: Vec<String>,
    lst_supplied: bool,
}

impl FeatureRaster {
    pub fn band(&self, name: &str) -> Option<&RasterGrid> {
        self.names.iter().position(|n| n == name).map(|k| &self.bands[k])
    }

    /// Feature vector of pixel `i`, NaN for nodata.
    pub fn pixel(&self, i: usize) -> Vec<f64> {
        self.bands.iter().map(|b| b.valid(i).unwrap_or(f64::NAN)).collect()
    }

    /// Sub-stack with the named bands, in the given order.
    pub fn select(&self, names: &[String]) -> Result<FeatureRaster> {
        let bands = names
            .iter()
            .map(|n| {
                self.band(n)
                    .cloned()
                    .ok_or_else(|| Error::SchemaMismatch(format!("feature band `{n}` not present")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureRaster {
            geometry: self.geometry.clone(),
            names: names.to_vec(),
            bands,
            lst_supplied: self.lst_supplied,
        })
    }

    /// Writes `<name>.tsr` per band plus `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (n, b) in self.names.iter().zip(&self.bands) {
            write_tsr(&dir.join(format!("{n}.tsr")), b)?;
        }
        let idx = FeatureIndex {
            geometry: self.geometry.clone(),
            bands: self.names.clone(),
            lst_supplied: self.lst_supplied,
        };
        let p = dir.join("index.json");
        std::fs::write(&p, serde_json::to_string_pretty(&idx)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("index.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let idx: FeatureIndex = serde_json::from_str(&text)?;
        let bands = idx
            .bands
            .iter()
            .map(|n| {
                let b = read_tsr(&dir.join(format!("{n}.tsr")))?;
                idx.geometry.ensure_same(&b.geometry)?;
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureRaster {
            geometry: idx.geometry,
            names: idx.bands,
            bands,
            lst_supplied: idx.lst_supplied,
        })
    }
}

/// Build the annual feature stack: band medians, VI and LST summaries,
/// optional elevation and climate (bilinearly resampled when their grid
/// differs from the stack's).
pub fn build_features(
    stack: &TimeStack,
    roles: &BandRoles,
    years: Option<(i32, i32)>,
    elevation: Option<&RasterGrid>,
    climate: &[RasterGrid],
) -> Result<FeatureRaster> {
    let geometry = stack
        .geometry()
        .ok_or_else(|| Error::InsufficientData("empty image stack".into()))?
        .clone();
    if !climate.is_empty() && climate.len() != N_BIO {
        return Err(Error::invalid(format!("expected {N_BIO} climate grids, got {}", climate.len())));
    }
    let range = years.map(|(a, b)| a..=b);
    let monthly = |band: &str| monthly_median_composite(stack, band, range.clone());
    let mut names = Vec::new();
    let mut bands = Vec::new();
    let mut push = |name: String, mut g: RasterGrid| {
        g.band_id = name.clone();
        g.timestamp = None;
        names.push(name);
        bands.push(g);
    };

    let mut by_band = std::collections::BTreeMap::new();
    let mut needed: Vec<&String> = roles.reflectance.iter().collect();
    needed.extend([&roles.red, &roles.nir, &roles.blue, &roles.swir]);
    for b in needed {
        if !by_band.contains_key(b) {
            by_band.insert(b.clone(), monthly(b)?);
        }
    }
    for b in &roles.reflectance {
        push(format!("{b}med"), median_over(&by_band[b])?);
    }
    let lst_monthly = roles.lst.as_deref().map(monthly).transpose()?;
    if let Some(m) = &lst_monthly {
        push("LSTmed".into(), median_over(m)?);
    }
    for vi in VegetationIndex::ALL {
        let months = (0..12)
            .map(|k| {
                vegetation_index(
                    SpectralBands {
                        red: Some(&by_band[&roles.red][k]),
                        nir: Some(&by_band[&roles.nir][k]),
                        blue: Some(&by_band[&roles.blue][k]),
                        swir: Some(&by_band[&roles.swir][k]),
                    },
                    vi,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let s = annual_summary(&months)?;
        push(format!("{}max", vi.label()), s.max);
        push(format!("{}min", vi.label()), s.min);
        push(format!("{}std", vi.label()), s.std);
        push(format!("{}sum", vi.label()), s.sum);
    }
    if let Some(m) = &lst_monthly {
        let s = annual_summary(m)?;
        push("LSTmax".into(), s.max);
        push("LSTmin".into(), s.min);
        push("LSTstd".into(), s.std);
        push("LSTsum".into(), s.sum);
    }
    let to_grid = |g: &RasterGrid| -> Result<RasterGrid> {
        if g.geometry == geometry {
            Ok(g.clone())
        } else {
            bilinear_resample(g, &geometry)
        }
    };
    if let Some(e) = elevation {
        push("Elevation".into(), to_grid(e)?);
    }
    for (k, c) in climate.iter().enumerate() {
        push(format!("BIO{}", k + 1), to_grid(c)?);
    }
    debug_assert_eq!(names, feature_band_names(roles, elevation.is_some(), !climate.is_empty()));
    Ok(FeatureRaster {
        geometry,
        names,
        bands,
        lst_supplied: roles.lst.is_some(),
    })
}

/// On-disk listing of a time stack: one entry per scene, paths relative to
/// the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackIndex {
    pub scenes: Vec<StackEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackEntry {
    pub band_id: String,
    pub date: String,
    pub path: PathBuf,
    pub qa_path: PathBuf,
}

pub fn load_stack(index_path: &Path) -> Result<TimeStack> {
    let text = std::fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let idx: StackIndex = serde_json::from_str(&text)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let scenes = idx
        .scenes
        .iter()
        .map(|e| {
            Ok(Scene {
                date: parse_date(&e.date)?,
                band_id: e.band_id.clone(),
                grid: read_tsr(&base.join(&e.path))?,
                qa: read_tsr(&base.join(&e.qa_path))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TimeStack::new(scenes)
}

/// Write every scene as TSR under `dir` and an `index.json` listing them.
pub fn save_stack(stack: &TimeStack, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(stack.scenes.len());
    for (k, s) in stack.scenes.iter().enumerate() {
        let stem = format!("{}_{}_{k:04}", s.band_id, s.date.format("%Y%m%d"));
        let path = PathBuf::from(format!("{stem}.tsr"));
        let qa_path = PathBuf::from(format!("{stem}_qa.tsr"));
        write_tsr(&dir.join(&path), &s.grid)?;
        write_tsr(&dir.join(&qa_path), &s.qa)?;
        entries.push(StackEntry {
            band_id: s.band_id.clone(),
            date: s.date.format("%Y-%m-%d").to_string(),
            path,
            qa_path,
        });
    }
    let p = dir.join("index.json");
    std::fs::write(&p, serde_json::to_string_pretty(&StackIndex { scenes: entries })?).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Population std.
    pub std: Vec<f64>,
    /// Features with zero spread; they standardize to 0.
    pub zero_std: Vec<bool>,
}

/// Z-score the columns of `x` (samples by features). Statistics are taken
/// from `x` unless `stats` is given.
pub fn standardize_features(x: &DMatrix<f64>, stats: Option<&FeatureStats>) -> Result<(DMatrix<f64>, FeatureStats)> {
    let p = x.ncols();
    let st = match stats {
        Some(s) => {
            if s.mean.len() != p || s.std.len() != p || s.zero_std.len() != p {
                return Err(Error::SchemaMismatch(format!("stats for {} features, data has {p}", s.mean.len())));
            }
            s.clone()
        }
        None => {
            if x.nrows() == 0 {
                return Err(Error::InsufficientData("no rows to standardize".into()));
            }
            let mut mean = Vec::with_capacity(p);
            let mut std = Vec::with_capacity(p);
            for j in 0..p {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                mean.push(crate::stats::mean(&col));
                std.push(crate::stats::pop_std(&col));
            }
            let zero_std = std.iter().map(|s| *s == 0.0).collect();
            FeatureStats { mean, std, zero_std }
        }
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let z = DMatrix::from_fn(x.nrows(), p, |i, j| {
        if st.zero_std[j] {
            0.0
        } else {
            (x[(i, j)] - st.mean[j]) / st.std[j]
        }
    });
    Ok((z, st))
}
