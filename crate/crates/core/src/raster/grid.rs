//! Georeferenced single-band grids and the TSR on-disk container.
//!
//! A TSR raster is a flat little-endian `f32` file in row-major order plus a
//! JSON sidecar header at `<path>.hdr`. Multi-band files store bands one
//! after another and set `band_count`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// North-up grid placement: `origin` is the top-left corner, rows run
/// southward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub crs_tag: String,
}

impl Geometry {
    pub fn new(width: usize, height: usize, origin_x: f64, origin_y: f64, pixel_size: f64, crs_tag: &str) -> Self {
        Geometry {
            width,
            height,
            origin_x,
            origin_y,
            pixel_size,
            crs_tag: crs_tag.to_string(),
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::GeometryMismatch("empty raster".into()));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::GeometryMismatch(format!("pixel_size {} must be > 0", self.pixel_size)));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::GeometryMismatch("non-finite origin".into()));
        }
        Ok(())
    }

    /// Map coordinates of a pixel center.
    pub fn center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Pixel containing a map coordinate, if inside the grid.
    pub fn pixel_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_x) / self.pixel_size).floor();
        let r = ((self.origin_y - y) / self.pixel_size).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height)
            .then_some((c as usize, r as usize))
    }

    /// (min_x, min_y, max_x, max_y).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x,
            self.origin_y - self.height as f64 * self.pixel_size,
            self.origin_x + self.width as f64 * self.pixel_size,
            self.origin_y,
        )
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{}x{} @ ({}, {}) size {} vs {}x{} @ ({}, {}) size {}",
                self.width,
                self.height,
                self.origin_x,
                self.origin_y,
                self.pixel_size,
                other.width,
                other.height,
                other.origin_x,
                other.origin_y,
                other.pixel_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub geometry: Geometry,
    /// Row-major.
    pub values: Vec<f64>,
    pub nodata: f64,
    pub band_id: String,
    pub timestamp: Option<String>,
}

impl RasterGrid {
    pub fn new(geometry: Geometry, values: Vec<f64>, nodata: f64) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.n_pixels() {
            return Err(Error::GeometryMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                geometry.width,
                geometry.height
            )));
        }
        if nodata.is_nan() {
            return Err(Error::invalid("nodata sentinel must not be NaN"));
        }
        Ok(RasterGrid {
            geometry,
            values,
            nodata,
            band_id: String::new(),
            timestamp: None,
        })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        let n = geometry.n_pixels();
        RasterGrid {
            geometry,
            values: vec![value; n],
            nodata: DEFAULT_NODATA,
            band_id: String::new(),
            timestamp: None,
        }
    }

    pub fn with_band(mut self, band_id: &str) -> Self {
        self.band_id = band_id.to_string();
        self
    }

    pub fn with_timestamp(mut self, ts: &str) -> Self {
        self.timestamp = Some(ts.to_string());
        self
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.geometry.width + col]
    }

    /// Value at flat index `i`, `None` for nodata or non-finite cells.
    pub fn valid(&self, i: usize) -> Option<f64> {
        let v = self.values[i];
        (v != self.nodata && v.is_finite()).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        (0..self.values.len()).filter(|&i| self.valid(i).is_some()).count()
    }

    /// Build a grid on `geometry` from `f(i) -> Option<value>`, evaluated in
    /// parallel over pixels.
    pub fn from_fn(geometry: Geometry, nodata: f64, f: impl Fn(usize) -> Option<f64> + Sync + Send) -> Self {
        let values = crate::par::map_range(geometry.n_pixels(), |i| f(i).unwrap_or(nodata));
        RasterGrid {
            geometry,
            values,
            nodata,
            band_id: String::new(),
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsrHeader {
    pub width: usize,
    pub height: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub crs_tag: String,
    pub nodata: f64,
    pub band_id: String,
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_codes: Option<BTreeMap<String, u8>>,
}

impl TsrHeader {
    fn geometry(&self) -> Geometry {
        Geometry {
            width: self.width,
            height: self.height,
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_size: self.pixel_size,
            crs_tag: self.crs_tag.clone(),
        }
    }

    fn for_grid(g: &RasterGrid) -> Self {
        TsrHeader {
            width: g.geometry.width,
            height: g.geometry.height,
            origin_x: g.geometry.origin_x,
            origin_y: g.geometry.origin_y,
            pixel_size: g.geometry.pixel_size,
            crs_tag: g.geometry.crs_tag.clone(),
            nodata: g.nodata,
            band_id: g.band_id.clone(),
            timestamp: g.timestamp.clone(),
            band_count: None,
            band_ids: None,
            class_codes: None,
        }
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

fn write_raw(path: &Path, header: &TsrHeader, bands: &[&RasterGrid]) -> Result<()> {
    let mut bytes = Vec::with_capacity(bands.iter().map(|b| b.values.len() * 4).sum());
    for b in bands {
        for v in &b.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let hp = header_path(path);
    std::fs::write(&hp, serde_json::to_string_pretty(header)?).map_err(|e| Error::io(&hp, e))
}

/// Write one band. Values are stored as `f32`.
pub fn write_tsr(path: &Path, grid: &RasterGrid) -> Result<()> {
    write_raw(path, &TsrHeader::for_grid(grid), &[grid])
}

/// Write a class-coded band with its code table.
pub fn write_tsr_classes(path: &Path, grid: &RasterGrid, codes: &BTreeMap<String, u8>) -> Result<()> {
    let mut h = TsrHeader::for_grid(grid);
    h.class_codes = Some(codes.clone());
    write_raw(path, &h, &[grid])
}

/// Write several same-geometry bands into one file, band-sequential.
pub fn write_tsr_bands(path: &Path, bands: &[RasterGrid]) -> Result<()> {
    let first = bands.first().ok_or_else(|| Error::invalid("no bands to write"))?;
    for b in bands {
        first.geometry.ensure_same(&b.geometry)?;
    }
    let mut h = TsrHeader::for_grid(first);
    h.band_count = Some(bands.len());
    h.band_ids = Some(bands.iter().map(|b| b.band_id.clone()).collect());
    write_raw(path, &h, &bands.iter().collect::<Vec<_>>())
}

pub fn read_tsr_header(path: &Path) -> Result<TsrHeader> {
    let hp = header_path(path);
    let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Read every band of a TSR file.
pub fn read_tsr_bands(path: &Path) -> Result<Vec<RasterGrid>> {
    let h = read_tsr_header(path)?;
    let geometry = h.geometry();
    geometry.validate()?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let count = h.band_count.unwrap_or(1);
    let n = geometry.n_pixels();
    if bytes.len() != n * count * 4 {
        return Err(Error::GeometryMismatch(format!(
            "{}: {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            n * count * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(values
        .chunks(n)
        .enumerate()
        .map(|(k, v)| RasterGrid {
            geometry: geometry.clone(),
            values: v.to_vec(),
            nodata: h.nodata,
            band_id: h
                .band_ids
                .as_ref()
                .and_then(|ids| ids.get(k).cloned())
                .unwrap_or_else(|| h.band_id.clone()),
            timestamp: h.timestamp.clone(),
        })
        .collect())
}

/// Read a single-band TSR file.
pub fn read_tsr(path: &Path) -> Result<RasterGrid> {
    let mut bands = read_tsr_bands(path)?;
    if bands.len() != 1 {
        return Err(Error::invalid(format!("{}: expected 1 band, found {}", path.display(), bands.len())));
    }
    Ok(bands.remove(0))
}
