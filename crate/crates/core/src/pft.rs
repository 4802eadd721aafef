//! PFT classification at fine resolution, accuracy assessment and
//! aggregation into coarse-pixel abundance fractions.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{fit_forest, Dataset, FeatureSchema, ForestModel, ForestParams, DEFAULT_MIN_NODE_SIZE};
use crate::par;
use crate::raster::{FeatureRaster, Geometry, RasterGrid, DEFAULT_NODATA};
use crate::seed::{derive_seed, keyed_hash, rng_for, stream};
use crate::trait_table::{PftClass, N_PFT};

pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.85;

/// Counts indexed `[reference][predicted]` in PFT code order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_PFT]; N_PFT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_PFT).map(|i| self.counts[i][i]).sum()
    }

    pub fn overall_accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.trace() as f64 / t as f64)
    }

    /// Chance agreement from the row and column marginals.
    pub fn expected_agreement(&self) -> Option<f64> {
        let t = self.total() as f64;
        if t == 0.0 {
            return None;
        }
        let mut pe = 0.0;
        for i in 0..N_PFT {
            let row: u64 = self.counts[i].iter().sum();
            let col: u64 = (0..N_PFT).map(|r| self.counts[r][i]).sum();
            pe += row as f64 * col as f64;
        }
        Some(pe / (t * t))
    }

    /// Cohen's kappa; `None` when undefined (empty matrix or chance
    /// agreement of 1).
    pub fn kappa(&self) -> Option<f64> {
        let po = self.overall_accuracy()?;
        let pe = self.expected_agreement()?;
        (pe < 1.0).then(|| (po - pe) / (1.0 - pe))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub matrix: ConfusionMatrix,
    pub overall_accuracy: f64,
    pub kappa: Option<f64>,
}

impl Agreement {
    pub fn from_matrix(matrix: ConfusionMatrix) -> Result<Self> {
        let overall_accuracy = matrix
            .overall_accuracy()
            .ok_or_else(|| Error::InsufficientData("empty confusion matrix".into()))?;
        let kappa = matrix.kappa();
        Ok(Agreement {
            matrix,
            overall_accuracy,
            kappa,
        })
    }
}

pub fn confusion_and_kappa(reference: &[PftClass], predicted: &[PftClass]) -> Result<Agreement> {
    if reference.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} reference labels vs {} predictions",
            reference.len(),
            predicted.len()
        )));
    }
    let mut counts = [[0u64; N_PFT]; N_PFT];
    for (r, p) in reference.iter().zip(predicted) {
        counts[r.index()][p.index()] += 1;
    }
    Agreement::from_matrix(ConfusionMatrix { counts })
}

fn class_at(grid: &RasterGrid, i: usize) -> Option<PftClass> {
    let v = grid.valid(i)?;
    if v.fract() != 0.0 || !(1.0..=N_PFT as f64).contains(&v) {
        return None;
    }
    PftClass::from_code(v as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPixel {
    pub pixel: usize,
    pub class: PftClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class: PftClass,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSelection {
    /// Sorted by class, then pixel index.
    pub samples: Vec<LabeledPixel>,
    pub shortfalls: Vec<Shortfall>,
}

/// Up to `per_class` pixels per class, drawn uniformly without replacement
/// from reference pixels whose quality exceeds `threshold`.
pub fn select_training_samples(
    reference: &RasterGrid,
    quality: &RasterGrid,
    per_class: usize,
    threshold: f64,
    seed: u64,
) -> Result<SampleSelection> {
    reference.geometry.ensure_same(&quality.geometry)?;
    if per_class == 0 {
        return Err(Error::invalid("per_class must be >= 1"));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); N_PFT];
    for i in 0..reference.values.len() {
        let Some(c) = class_at(reference, i) else { continue };
        if quality.valid(i).is_some_and(|q| q > threshold) {
            pools[c.index()].push(i);
        }
    }
    let mut samples = Vec::new();
    let mut shortfalls = Vec::new();
    for c in PftClass::ALL {
        let pool = &pools[c.index()];
        if pool.len() < per_class {
            shortfalls.push(Shortfall {
                class: c,
                requested: per_class,
                available: pool.len(),
            });
        }
        let take = per_class.min(pool.len());
        let mut rng = rng_for(seed, &[stream::SAMPLE, u64::from(c.code())]);
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        picked.sort_unstable();
        samples.extend(picked.into_iter().map(|pixel| LabeledPixel { pixel, class: c }));
    }
    Ok(SampleSelection { samples, shortfalls })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierParams {
    pub n_trees: usize,
    pub max_splits: usize,
    #[serde(default)]
    pub mtry: Option<usize>,
    #[serde(default = "default_min_node")]
    pub min_node_size: usize,
}

fn default_min_node() -> usize {
    DEFAULT_MIN_NODE_SIZE
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            n_trees: 100,
            max_splits: 255,
            mtry: None,
            min_node_size: DEFAULT_MIN_NODE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub model: ForestModel,
    pub validation: Agreement,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Stratified half split: within each class, samples ordered by a keyed
/// hash of their id; the first ceil(n/2) train, the rest validate.
pub fn stratified_half_split(ids: &[u64], labels: &[PftClass], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let key = derive_seed(seed, &[stream::SPLIT]);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in PftClass::ALL {
        let mut members: Vec<usize> = (0..ids.len()).filter(|&k| labels[k] == c).collect();
        members.sort_by_key(|&k| (keyed_hash(key, &ids[k].to_le_bytes()), ids[k]));
        let n_train = members.len().div_ceil(2);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Fit a bagged classification forest on a stratified half of the samples
/// and score it on the other half.
pub fn train_classifier_on(
    data: &Dataset,
    labels: &[PftClass],
    ids: &[u64],
    params: &ClassifierParams,
    seed: u64,
) -> Result<TrainedClassifier> {
    if labels.len() != data.n_rows() || ids.len() != data.n_rows() {
        return Err(Error::invalid("labels, ids and rows differ in length"));
    }
    let distinct = PftClass::ALL.iter().filter(|c| labels.contains(c)).count();
    if distinct < 2 {
        return Err(Error::InsufficientData("classifier needs at least two classes".into()));
    }
    let (train, val) = stratified_half_split(ids, labels, seed);
    let y: Vec<f64> = train.iter().map(|&k| labels[k].index() as f64).collect();
    let fp = ForestParams {
        mtry: params.mtry,
        min_node_size: params.min_node_size,
        ..ForestParams::classification(params.n_trees, N_PFT, params.max_splits)
    };
    let model = fit_forest(&data.select_rows(&train), &y, &fp, derive_seed(seed, &[stream::TREE]))?;
    let preds = model.predict_dataset(&data.select_rows(&val))?;
    let predicted: Vec<PftClass> = preds
        .iter()
        .map(|p| PftClass::from_index(p.value as usize).expect("class index in range"))
        .collect();
    let reference: Vec<PftClass> = val.iter().map(|&k| labels[k]).collect();
    let validation = if val.is_empty() {
        return Err(Error::InsufficientData("no validation samples".into()));
    } else {
        confusion_and_kappa(&reference, &predicted)?
    };
    Ok(TrainedClassifier {
        model,
        validation,
        n_train: train.len(),
        n_validation: val.len(),
    })
}

pub fn feature_schema(features: &FeatureRaster) -> FeatureSchema {
    FeatureSchema::numeric(&features.names)
}

/// Dataset of selected pixels from a feature stack.
pub fn pixel_dataset(features: &FeatureRaster, pixels: &[usize]) -> Result<Dataset> {
    let cols = features
        .bands
        .iter()
        .map(|b| pixels.iter().map(|&i| b.valid(i).unwrap_or(f64::NAN)).collect())
        .collect();
    Dataset::from_columns(feature_schema(features), cols)
}

pub fn train_classifier(
    features: &FeatureRaster,
    samples: &SampleSelection,
    params: &ClassifierParams,
    seed: u64,
) -> Result<TrainedClassifier> {
    let pixels: Vec<usize> = samples.samples.iter().map(|s| s.pixel).collect();
    let labels: Vec<PftClass> = samples.samples.iter().map(|s| s.class).collect();
    let ids: Vec<u64> = pixels.iter().map(|&p| p as u64).collect();
    train_classifier_on(&pixel_dataset(features, &pixels)?, &labels, &ids, params, seed)
}

/// Classify every pixel; pixels with all features missing are nodata.
pub fn classify_map(model: &ForestModel, features: &FeatureRaster) -> Result<RasterGrid> {
    if model.schema != feature_schema(features) {
        return Err(Error::SchemaMismatch(format!(
            "classifier trained on {:?}, features are {:?}",
            model.schema.names(),
            features.names
        )));
    }
    let mut out = RasterGrid::from_fn(features.geometry.clone(), DEFAULT_NODATA, |i| {
        let row = features.pixel(i);
        if row.iter().all(|v| v.is_nan()) {
            return None;
        }
        let k = model.predict(&row).value as usize;
        Some(f64::from(PftClass::from_index(k).expect("class index in range").code()))
    });
    out.band_id = "pft".into();
    Ok(out)
}

/// Per coarse pixel, PFT fractions in code order; `None` without valid
/// fine pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbundanceGrid {
    pub geometry: Geometry,
    pub fractions: Vec<Option<[f64; N_PFT]>>,
}

impl AbundanceGrid {
    pub fn to_bands(&self) -> Vec<RasterGrid> {
        PftClass::ALL
            .iter()
            .map(|c| {
                let mut g = RasterGrid::from_fn(self.geometry.clone(), DEFAULT_NODATA, |i| {
                    self.fractions[i].map(|f| f[c.index()])
                });
                g.band_id = c.label().to_string();
                g
            })
            .collect()
    }

    pub fn from_bands(bands: &[RasterGrid]) -> Result<Self> {
        if bands.len() != N_PFT {
            return Err(Error::invalid(format!("abundance needs {N_PFT} bands, got {}", bands.len())));
        }
        let geometry = bands[0].geometry.clone();
        for b in bands {
            geometry.ensure_same(&b.geometry)?;
        }
        let fractions = (0..geometry.n_pixels())
            .map(|i| {
                let mut f = [0.0; N_PFT];
                for (k, b) in bands.iter().enumerate() {
                    f[k] = b.valid(i)?;
                }
                Some(f)
            })
            .collect();
        Ok(AbundanceGrid { geometry, fractions })
    }

    /// Most abundant PFT (lowest code on ties).
    pub fn dominant(&self, i: usize) -> Option<PftClass> {
        let f = self.fractions[i]?;
        PftClass::from_index(crate::forest::tree::argmax(&f))
    }
}

fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let n = r.round();
    ((r - n).abs() <= 1e-9 * r.max(1.0) && n >= 1.0).then_some(n as usize)
}

/// Fractions of each PFT among the valid fine pixels of every coarse cell.
/// The coarse pixel size must be an integer multiple of the fine one and
/// the grids must share pixel edges.
pub fn aggregate_abundance(fine: &RasterGrid, coarse: &Geometry) -> Result<AbundanceGrid> {
    coarse.validate()?;
    let f = &fine.geometry;
    let ratio = integer_ratio(coarse.pixel_size, f.pixel_size).ok_or_else(|| {
        Error::GeometryMismatch(format!(
            "coarse pixel size {} is not an integer multiple of {}",
            coarse.pixel_size, f.pixel_size
        ))
    })?;
    let off_x = (coarse.origin_x - f.origin_x) / f.pixel_size;
    let off_y = (f.origin_y - coarse.origin_y) / f.pixel_size;
    if (off_x - off_x.round()).abs() > 1e-9 || (off_y - off_y.round()).abs() > 1e-9 {
        return Err(Error::GeometryMismatch("coarse and fine origins are not aligned".into()));
    }
    let (ox, oy) = (off_x.round() as i64, off_y.round() as i64);
    let fractions = par::map_range(coarse.n_pixels(), |i| {
        let (cc, cr) = ((i % coarse.width) as i64, (i / coarse.width) as i64);
        let mut counts = [0u64; N_PFT];
        for dr in 0..ratio as i64 {
            let r = oy + cr * ratio as i64 + dr;
            if r < 0 || r >= f.height as i64 {
                continue;
            }
            for dc in 0..ratio as i64 {
                let c = ox + cc * ratio as i64 + dc;
                if c < 0 || c >= f.width as i64 {
                    continue;
                }
                if let Some(class) = class_at(fine, r as usize * f.width + c as usize) {
                    counts[class.index()] += 1;
                }
            }
        }
        let n: u64 = counts.iter().sum();
        (n > 0).then(|| counts.map(|k| k as f64 / n as f64))
    });
    Ok(AbundanceGrid {
        geometry: coarse.clone(),
        fractions,
    })
}
