//! Seeded synthetic worlds for desk-scale runs: a fine PFT map, image
//! stacks, climate surfaces and a trait table with missing cells.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{InputPaths, PipelineConfig};
use crate::error::{Error, Result};
use crate::raster::{save_stack, write_tsr, write_tsr_classes, Geometry, RasterGrid, Scene, TimeStack, DEFAULT_NODATA};
use crate::seed::{rng_for, stream, Rng};
use crate::trait_table::{
    GrowthForm, LeafTrait, LeafType, Phenology, PftClass, TraitRecord, TraitTable, N_BIO, N_PFT, N_TRAITS,
};

pub const CRS_TAG: &str = "EPSG:4326";

/// Leaf-level (mean, std) per vegetated PFT in `PftClass::VEGETATED` order,
/// traits in `LeafTrait::ALL` order.
pub const TRAIT_STATS: [[(f64, f64); N_TRAITS]; 6] = [
    [(4.82, 2.67), (0.31, 0.10), (12.18, 2.47), (1.15, 0.36), (9.48, 2.03)],
    [(12.07, 5.15), (0.34, 0.06), (18.82, 5.85), (0.70, 0.30), (19.10, 4.48)],
    [(9.19, 2.85), (0.28, 0.06), (20.01, 3.24), (1.86, 0.40), (10.18, 2.77)],
    [(18.57, 8.38), (0.33, 0.06), (22.78, 4.82), (1.40, 0.52), (14.20, 4.34)],
    [(14.54, 7.46), (0.29, 0.06), (17.56, 7.15), (1.11, 0.53), (15.29, 5.30)],
    [(20.97, 8.58), (0.26, 0.07), (20.52, 7.81), (1.28, 0.58), (11.88, 5.60)],
];

/// Missing share per trait in `LeafTrait::ALL` order.
pub const DEFAULT_MISSING: [f64; N_TRAITS] = [0.47, 0.45, 0.68, 0.74, 0.84];

/// Loadings of the standardized trait deviation on the location effect,
/// the species effect and individual noise; squares sum to one.
const LOAD_SPACE: f64 = 0.7;
const LOAD_SPECIES: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Fine grid size in pixels.
    pub width: usize,
    pub height: usize,
    /// Fine pixels per coarse pixel along each axis.
    pub ratio: usize,
    /// Top-left corner, degrees.
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub pixel_deg: f64,
    /// Typical PFT patch size in fine pixels.
    pub patch_pixels: f64,
    pub label_noise: f64,
    pub n_records: usize,
    pub species_per_pft: usize,
    pub missing: [f64; N_TRAITS],
    /// Share of records with coordinates.
    pub georeferenced: f64,
    pub year: i32,
    pub cloud_fraction: f64,
    pub reflectance_noise: f64,
    /// Climate grid cells along the x axis.
    pub climate_cells: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 256,
            ratio: 16,
            origin_lon: 5.0,
            origin_lat: 56.0,
            pixel_deg: 4.0 / 256.0,
            patch_pixels: 24.0,
            label_noise: 0.05,
            n_records: 2000,
            species_per_pft: 8,
            missing: DEFAULT_MISSING,
            georeferenced: 1.0,
            year: 2015,
            cloud_fraction: 0.1,
            reflectance_noise: 0.01,
            climate_cells: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.ratio == 0 {
            return bad("width, height and ratio must be positive".into());
        }
        if !self.width.is_multiple_of(self.ratio) || !self.height.is_multiple_of(self.ratio) {
            return bad(format!("{}x{} is not divisible by ratio {}", self.width, self.height, self.ratio));
        }
        if !(self.pixel_deg > 0.0 && self.patch_pixels > 0.0) {
            return bad("pixel_deg and patch_pixels must be positive".into());
        }
        let lat_span = self.height as f64 * self.pixel_deg;
        let lon_span = self.width as f64 * self.pixel_deg;
        if self.origin_lat > 90.0 || self.origin_lat - lat_span < -90.0 {
            return bad("domain leaves the latitude range".into());
        }
        if self.origin_lon < -180.0 || self.origin_lon + lon_span > 180.0 {
            return bad("domain leaves the longitude range".into());
        }
        for (name, v) in [
            ("label_noise", self.label_noise),
            ("georeferenced", self.georeferenced),
            ("cloud_fraction", self.cloud_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(m) = self.missing.iter().find(|m| !(0.0..1.0).contains(*m)) {
            return bad(format!("missing fractions must lie in [0, 1), got {m}"));
        }
        if self.species_per_pft == 0 || self.climate_cells == 0 {
            return bad("species_per_pft and climate_cells must be positive".into());
        }
        if !(self.reflectance_noise >= 0.0) {
            return bad("reflectance_noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn fine_geometry(&self) -> Geometry {
        Geometry::new(self.width, self.height, self.origin_lon, self.origin_lat, self.pixel_deg, CRS_TAG)
    }

    pub fn coarse_geometry(&self) -> Geometry {
        Geometry::new(
            self.width / self.ratio,
            self.height / self.ratio,
            self.origin_lon,
            self.origin_lat,
            self.pixel_deg * self.ratio as f64,
            CRS_TAG,
        )
    }

    pub fn climate_geometry(&self) -> Geometry {
        let size = self.width as f64 * self.pixel_deg / self.climate_cells as f64;
        let rows = (self.height as f64 * self.pixel_deg / size).ceil().max(1.0) as usize;
        Geometry::new(self.climate_cells, rows, self.origin_lon, self.origin_lat, size, CRS_TAG)
    }

    fn spans(&self) -> (f64, f64) {
        (self.height as f64 * self.pixel_deg, self.width as f64 * self.pixel_deg)
    }

    /// Normalized position: `t` runs 0 (north edge) to 1 (south edge), `s`
    /// 0 (west) to 1 (east).
    fn unit(&self, lat: f64, lon: f64) -> (f64, f64) {
        let (lat_span, lon_span) = self.spans();
        ((self.origin_lat - lat) / lat_span, (lon - self.origin_lon) / lon_span)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub seed: u64,
    pub truth: RasterGrid,
    pub reference: RasterGrid,
    pub quality: RasterGrid,
    pub fine_stack: TimeStack,
    pub coarse_stack: TimeStack,
    pub elevation: RasterGrid,
    /// BIO1 .. BIO19.
    pub climate: Vec<RasterGrid>,
    /// Records before masking.
    pub complete: TraitTable,
    pub records: TraitTable,
}

mod part {
    pub const PFT: u64 = 1;
    pub const REFERENCE: u64 = 2;
    pub const FINE: u64 = 3;
    pub const COARSE: u64 = 4;
    pub const ELEVATION: u64 = 5;
    pub const RECORDS: u64 = 6;
    pub const MISSING: u64 = 7;
    pub const SPECIES: u64 = 8;
}

fn rng(seed: u64, part: u64) -> Rng {
    rng_for(seed, &[stream::SYNTH, part])
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth value noise on a lattice with `spacing` pixel cells.
struct ValueNoise {
    cols: usize,
    values: Vec<f64>,
    spacing: f64,
}

impl ValueNoise {
    fn new(width: usize, height: usize, spacing: f64, rng: &mut Rng) -> Self {
        let cols = (width as f64 / spacing).ceil() as usize + 2;
        let rows = (height as f64 / spacing).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.random::<f64>()).collect();
        ValueNoise { cols, values, spacing }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x / self.spacing, y / self.spacing);
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let smooth = |f: f64| f * f * (3.0 - 2.0 * f);
        let (fx, fy) = (smooth(u - i as f64), smooth(v - j as f64));
        let g = |a: usize, b: usize| self.values[b * self.cols + a];
        let top = g(i, j) * (1.0 - fx) + g(i + 1, j) * fx;
        let bottom = g(i, j + 1) * (1.0 - fx) + g(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Latitudinal preference added to each class's noise field.
fn class_bias(class: usize, t: f64) -> f64 {
    match class {
        0 => 0.3 * (1.0 - t),
        1 => 0.3 * t,
        2 => 0.25 * (1.0 - t) - 0.05,
        3 => 0.15 - 0.3 * (t - 0.5).abs(),
        4 => 0.1 * t,
        5 => 0.05,
        _ => -0.2,
    }
}

fn pft_map(cfg: &SynthConfig, seed: u64) -> RasterGrid {
    let mut r = rng(seed, part::PFT);
    let fields: Vec<ValueNoise> = (0..N_PFT)
        .map(|_| ValueNoise::new(cfg.width, cfg.height, cfg.patch_pixels, &mut r))
        .collect();
    let geom = cfg.fine_geometry();
    let w = cfg.width;
    let h = cfg.height as f64;
    RasterGrid::from_fn(geom, DEFAULT_NODATA, |i| {
        let (col, row) = (i % w, i / w);
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        let t = y / h;
        let scores: Vec<f64> = (0..N_PFT).map(|c| fields[c].at(x, y) + class_bias(c, t)).collect();
        let best = crate::forest::tree::argmax(&scores);
        Some(f64::from(PftClass::from_index(best).expect("class index").code()))
    })
}

fn reference_map(truth: &RasterGrid, cfg: &SynthConfig, seed: u64) -> (RasterGrid, RasterGrid) {
    let mut r = rng(seed, part::REFERENCE);
    let mut reference = truth.clone();
    let mut quality = RasterGrid::filled(truth.geometry.clone(), 0.0);
    for i in 0..truth.values.len() {
        if r.random::<f64>() < cfg.label_noise {
            let shift = r.random_range(1..N_PFT) as f64;
            reference.values[i] = (truth.values[i] - 1.0 + shift).rem_euclid(N_PFT as f64) + 1.0;
            quality.values[i] = r.random_range(0.4..0.9);
        } else {
            quality.values[i] = r.random_range(0.75..1.0);
        }
    }
    quality.band_id = "quality".into();
    reference.band_id = "pft".into();
    (reference, quality)
}

const BANDS: [&str; 5] = ["blue", "red", "nir", "swir", "lst"];

/// (base, seasonal amplitude) per class and reflectance band.
const SIGNATURES: [[(f64, f64); 4]; N_PFT] = [
    [(0.03, -0.005), (0.03, -0.01), (0.25, 0.05), (0.12, -0.01)],
    [(0.03, -0.005), (0.03, -0.005), (0.35, 0.03), (0.15, -0.01)],
    [(0.04, -0.01), (0.06, -0.03), (0.22, 0.12), (0.14, -0.03)],
    [(0.05, -0.01), (0.07, -0.04), (0.28, 0.18), (0.17, -0.04)],
    [(0.06, -0.01), (0.10, -0.03), (0.25, 0.06), (0.22, -0.03)],
    [(0.05, -0.015), (0.09, -0.05), (0.26, 0.15), (0.20, -0.05)],
    [(0.12, 0.0), (0.18, 0.005), (0.22, 0.005), (0.30, 0.005)],
];

const LST_OFFSET: [f64; N_PFT] = [-2.0, -1.0, -2.0, -1.5, 1.0, 0.5, 5.0];

fn season(month: usize) -> f64 {
    (std::f64::consts::PI * (month as f64 + 0.5) / 12.0).sin().powi(2)
}

/// Noise-free signal of one class in one band and month at latitude
/// position `t`.
fn clean_signal(class: usize, band: usize, month: usize, t: f64) -> f64 {
    let s = season(month);
    if band == 4 {
        return 272.0 + 16.0 * s + 8.0 * t + LST_OFFSET[class];
    }
    let (base, amp) = SIGNATURES[class][band];
    base + amp * s * (1.0 - 0.3 * t)
}

fn scene_date(year: i32, month: usize) -> Result<NaiveDate> {
    NaiveDate::from_ymd_opt(year, month as u32 + 1, 15).ok_or_else(|| Error::invalid(format!("bad year {year}")))
}

/// One scene per band and month; `mix(i)` lists (class, weight) for pixel
/// `i` of `geom`.
fn image_stack(
    cfg: &SynthConfig,
    geom: &Geometry,
    mix: &[Vec<(usize, f64)>],
    mut r: Rng,
) -> Result<TimeStack> {
    let lat_span = cfg.spans().0;
    let mut scenes = Vec::with_capacity(12 * BANDS.len());
    for month in 0..12 {
        let date = scene_date(cfg.year, month)?;
        for (b, band) in BANDS.iter().enumerate() {
            let scale = if b == 4 { 100.0 } else { 1.0 };
            let mut values = Vec::with_capacity(geom.n_pixels());
            let mut qa = Vec::with_capacity(geom.n_pixels());
            for (i, m) in mix.iter().enumerate() {
                let t = (cfg.origin_lat - geom.center(i % geom.width, i / geom.width).1) / lat_span;
                let clean: f64 = m.iter().map(|&(c, w)| w * clean_signal(c, b, month, t)).sum();
                let noisy = clean + scale * cfg.reflectance_noise * normal(&mut r);
                if r.random::<f64>() < cfg.cloud_fraction {
                    values.push(if b == 4 { 255.0 } else { 0.6 });
                    qa.push(0.0);
                } else {
                    values.push(noisy);
                    qa.push(1.0);
                }
            }
            let ts = date.format("%Y-%m-%d").to_string();
            scenes.push(Scene {
                date,
                band_id: band.to_string(),
                grid: RasterGrid::new(geom.clone(), values, DEFAULT_NODATA)?
                    .with_band(band)
                    .with_timestamp(&ts),
                qa: RasterGrid::new(geom.clone(), qa, DEFAULT_NODATA)?.with_band("qa"),
            });
        }
    }
    TimeStack::new(scenes)
}

fn class_index(code: f64) -> usize {
    PftClass::from_code(code as u8).expect("class code").index()
}

/// Bioclimatic surface `k` (0-based) at normalized position `(t, s)`.
fn bio_value(k: usize, t: f64, s: f64) -> f64 {
    let kf = k as f64;
    let base = 10.0 + 40.0 * kf;
    let lat_slope = if k.is_multiple_of(2) { 6.0 + kf } else { -(4.0 + 0.5 * kf) };
    let lon_slope = 3.0 * ((kf + 1.0) * 0.7).sin();
    let curve = 2.0 * ((kf + 1.0) * 1.3).cos();
    base + lat_slope * t + lon_slope * s + curve * (t - 0.5) * (t - 0.5)
}

fn climate_grids(cfg: &SynthConfig) -> Result<Vec<RasterGrid>> {
    let geom = cfg.climate_geometry();
    (0..N_BIO)
        .map(|k| {
            let mut g = RasterGrid::from_fn(geom.clone(), DEFAULT_NODATA, |i| {
                let (lon, lat) = geom.center(i % geom.width, i / geom.width);
                let (t, s) = cfg.unit(lat, lon);
                Some(bio_value(k, t, s))
            });
            g.band_id = format!("BIO{}", k + 1);
            Ok(g)
        })
        .collect()
}

fn elevation_grid(cfg: &SynthConfig, seed: u64) -> RasterGrid {
    let geom = cfg.climate_geometry();
    let mut r = rng(seed, part::ELEVATION);
    let noise = ValueNoise::new(geom.width, geom.height, 3.0, &mut r);
    let w = geom.width;
    let mut g = RasterGrid::from_fn(geom, DEFAULT_NODATA, |i| {
        Some(150.0 + 600.0 * noise.at((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
    });
    g.band_id = "Elevation".into();
    g
}

/// Location effect on trait `k`: zero mean and unit variance over a
/// uniform domain, non-monotonic in latitude.
pub fn location_effect(k: usize, t: f64, s: f64) -> f64 {
    let phase = k as f64 * std::f64::consts::PI / 5.0;
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    0.8 * std::f64::consts::SQRT_2 * (2.0 * std::f64::consts::PI * t + phase).cos()
        + sign * 0.6 * 3f64.sqrt() * (2.0 * s - 1.0)
}

/// Trait sign of the shared species effect.
const SPECIES_SIGN: [f64; N_TRAITS] = [1.0, -1.0, 1.0, 1.0, -1.0];

/// Evenly spread, exactly centred unit-variance offsets in shuffled order.
fn species_offsets(m: usize, r: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|j| (j as f64 + 0.5) / m as f64 - 0.5).collect();
    let sd = crate::stats::pop_std(&raw);
    let mut v: Vec<f64> = raw.iter().map(|x| if sd > 0.0 { x / sd } else { 0.0 }).collect();
    v.shuffle(r);
    v
}

fn categories(pft: PftClass) -> (GrowthForm, LeafType, Phenology) {
    match pft {
        PftClass::Enf => (GrowthForm::Tree, LeafType::Needleleaf, Phenology::Evergreen),
        PftClass::Ebf => (GrowthForm::Tree, LeafType::Broadleaf, Phenology::Evergreen),
        PftClass::Dnf => (GrowthForm::Tree, LeafType::Needleleaf, Phenology::Deciduous),
        PftClass::Dbf => (GrowthForm::Tree, LeafType::Broadleaf, Phenology::Deciduous),
        PftClass::Shl => (GrowthForm::Shrub, LeafType::Broadleaf, Phenology::Deciduous),
        PftClass::Grl | PftClass::Barren => (GrowthForm::Grass, LeafType::Unknown, Phenology::Unknown),
    }
}

fn trait_value(k: usize, mean: f64, sd: f64, systematic: f64, r: &mut Rng) -> f64 {
    let noise_load = (1.0 - LOAD_SPACE * LOAD_SPACE - LOAD_SPECIES * LOAD_SPECIES).sqrt();
    let upper = if k == LeafTrait::Ldmc.index() { 1.0 } else { f64::INFINITY };
    for _ in 0..1000 {
        let v = mean + sd * (systematic + noise_load * normal(r));
        if v > 0.0 && v < upper {
            return v;
        }
    }
    mean
}

fn trait_records(cfg: &SynthConfig, seed: u64) -> Vec<TraitRecord> {
    let mut sr = rng(seed, part::SPECIES);
    let offsets: Vec<Vec<f64>> = (0..6).map(|_| species_offsets(cfg.species_per_pft, &mut sr)).collect();
    let mut r = rng(seed, part::RECORDS);
    let (lat_span, lon_span) = cfg.spans();
    (0..cfg.n_records)
        .map(|i| {
            let p = r.random_range(0..6);
            let pft = PftClass::VEGETATED[p];
            let j = r.random_range(0..cfg.species_per_pft);
            let (t, s) = (r.random::<f64>(), r.random::<f64>());
            let georef = r.random::<f64>() < cfg.georeferenced;
            let (lat, lon) = (cfg.origin_lat - t * lat_span, cfg.origin_lon + s * lon_span);
            let mut traits = [None; N_TRAITS];
            for k in 0..N_TRAITS {
                let (mean, sd) = TRAIT_STATS[p][k];
                let systematic =
                    LOAD_SPACE * location_effect(k, t, s) + LOAD_SPECIES * SPECIES_SIGN[k] * offsets[p][j];
                traits[k] = Some(trait_value(k, mean, sd, systematic, &mut r));
            }
            let climate = if georef {
                std::array::from_fn(|k| Some(bio_value(k, t, s)))
            } else {
                [None; N_BIO]
            };
            let (growth_form, leaf_type, leaf_phenology) = categories(pft);
            let label = pft.label();
            TraitRecord {
                record_id: format!("rec{i:06}"),
                species: format!("{label}_sp{j:02}"),
                genus: format!("{label}_g{:02}", j / 2),
                family: format!("{label}_f{:02}", j / 4),
                growth_form,
                leaf_type,
                leaf_phenology,
                latitude: georef.then_some(lat),
                longitude: georef.then_some(lon),
                climate,
                traits,
            }
        })
        .collect()
}

fn mask_records(records: &[TraitRecord], missing: &[f64; N_TRAITS], seed: u64) -> Vec<TraitRecord> {
    let mut r = rng(seed, part::MISSING);
    records
        .iter()
        .map(|rec| {
            let mut out = rec.clone();
            for k in 0..N_TRAITS {
                if r.random::<f64>() < missing[k] {
                    out.traits[k] = None;
                }
            }
            out
        })
        .collect()
}

/// Generate a world. Identical config and seed give an identical world.
pub fn synth_world(cfg: &SynthConfig, seed: u64) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let truth = {
        let mut g = pft_map(cfg, seed);
        g.band_id = "pft".into();
        g
    };
    let (reference, quality) = reference_map(&truth, cfg, seed);
    let fine_geom = cfg.fine_geometry();
    let fine_mix: Vec<Vec<(usize, f64)>> = truth.values.iter().map(|&c| vec![(class_index(c), 1.0)]).collect();
    let fine_stack = image_stack(cfg, &fine_geom, &fine_mix, rng(seed, part::FINE))?;
    let coarse_geom = cfg.coarse_geometry();
    let per_block = (cfg.ratio * cfg.ratio) as f64;
    let coarse_mix: Vec<Vec<(usize, f64)>> = (0..coarse_geom.n_pixels())
        .map(|i| {
            let (cc, cr) = (i % coarse_geom.width, i / coarse_geom.width);
            let mut counts = [0usize; N_PFT];
            for dr in 0..cfg.ratio {
                for dc in 0..cfg.ratio {
                    let fi = (cr * cfg.ratio + dr) * cfg.width + cc * cfg.ratio + dc;
                    counts[class_index(truth.values[fi])] += 1;
                }
            }
            (0..N_PFT)
                .filter(|&c| counts[c] > 0)
                .map(|c| (c, counts[c] as f64 / per_block))
                .collect()
        })
        .collect();
    let coarse_stack = image_stack(cfg, &coarse_geom, &coarse_mix, rng(seed, part::COARSE))?;
    let complete_records = trait_records(cfg, seed);
    let masked = mask_records(&complete_records, &cfg.missing, seed);
    Ok(SyntheticWorld {
        config: cfg.clone(),
        seed,
        truth,
        reference,
        quality,
        fine_stack,
        coarse_stack,
        elevation: elevation_grid(cfg, seed),
        climate: climate_grids(cfg)?,
        complete: TraitTable::new(complete_records)?,
        records: TraitTable::new(masked)?,
    })
}

/// Where [`write_world`] put each component, relative to the world directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFiles {
    pub traits: PathBuf,
    pub traits_complete: PathBuf,
    pub truth: PathBuf,
    pub reference: PathBuf,
    pub quality: PathBuf,
    pub fine_stack: PathBuf,
    pub coarse_stack: PathBuf,
    pub elevation: PathBuf,
    pub climate_dir: PathBuf,
}

impl Default for WorldFiles {
    fn default() -> Self {
        WorldFiles {
            traits: "traits.csv".into(),
            traits_complete: "traits_complete.csv".into(),
            truth: "truth_pft.tsr".into(),
            reference: "reference.tsr".into(),
            quality: "quality.tsr".into(),
            fine_stack: "fine_stack/index.json".into(),
            coarse_stack: "coarse_stack/index.json".into(),
            elevation: "elevation.tsr".into(),
            climate_dir: "climate".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldDescription {
    seed: u64,
    config: SynthConfig,
    trait_stats: Vec<PftStats>,
    files: WorldFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PftStats {
    pft: String,
    mean: [f64; N_TRAITS],
    std: [f64; N_TRAITS],
}

/// Write every component under `dir`, plus `world.json` and a
/// `pipeline.toml` that runs the full pipeline on it into `dir/run`.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<WorldFiles> {
    let files = WorldFiles::default();
    let clim_dir = dir.join(&files.climate_dir);
    std::fs::create_dir_all(&clim_dir).map_err(|e| Error::io(&clim_dir, e))?;
    world.records.save(&dir.join(&files.traits))?;
    world.complete.save(&dir.join(&files.traits_complete))?;
    let codes = PftClass::code_map();
    write_tsr_classes(&dir.join(&files.truth), &world.truth, &codes)?;
    write_tsr_classes(&dir.join(&files.reference), &world.reference, &codes)?;
    write_tsr(&dir.join(&files.quality), &world.quality)?;
    save_stack(&world.fine_stack, &dir.join("fine_stack"))?;
    save_stack(&world.coarse_stack, &dir.join("coarse_stack"))?;
    write_tsr(&dir.join(&files.elevation), &world.elevation)?;
    for (k, g) in world.climate.iter().enumerate() {
        write_tsr(&clim_dir.join(format!("BIO{}.tsr", k + 1)), g)?;
    }
    let desc = WorldDescription {
        seed: world.seed,
        config: world.config.clone(),
        trait_stats: PftClass::VEGETATED
            .iter()
            .enumerate()
            .map(|(p, c)| PftStats {
                pft: c.label().to_string(),
                mean: TRAIT_STATS[p].map(|s| s.0),
                std: TRAIT_STATS[p].map(|s| s.1),
            })
            .collect(),
        files: files.clone(),
    };
    let p = dir.join("world.json");
    std::fs::write(&p, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&p, e))?;
    world_pipeline_config(&files, world.seed).save(&dir.join("pipeline.toml"))?;
    Ok(files)
}

/// Pipeline config over a written world, with paths relative to the world
/// directory.
pub fn world_pipeline_config(files: &WorldFiles, seed: u64) -> PipelineConfig {
    PipelineConfig::new(
        seed,
        "run".into(),
        InputPaths {
            table: Some(files.traits.clone()),
            imputed: None,
            fine_stack: Some(files.fine_stack.clone()),
            coarse_stack: Some(files.coarse_stack.clone()),
            reference: Some(files.reference.clone()),
            quality: Some(files.quality.clone()),
            elevation: Some(files.elevation.clone()),
            climate_dir: Some(files.climate_dir.clone()),
        },
    )
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
