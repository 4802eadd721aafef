//! Run configuration: one TOML document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cwm::CwmConfig;
use crate::error::{Error, Result};
use crate::gapfill::HyperGrid;
use crate::pft::{ClassifierParams, DEFAULT_QUALITY_THRESHOLD};
use crate::raster::BandRoles;
use crate::regress::eval::{DEFAULT_REALIZATIONS, DEFAULT_TRAIN_FRACTION};
use crate::regress::{Method, MethodGrids};
use crate::trait_table::{GrowthForm, LeafTrait};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; the global pool size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub stages: StageToggles,
    pub inputs: InputPaths,
    #[serde(default)]
    pub gapfill: GapfillSection,
    #[serde(default)]
    pub features: FeaturesSection,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default)]
    pub cwm: CwmConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub gapfill: bool,
    pub features: bool,
    pub classify: bool,
    pub cwm: bool,
    pub train: bool,
    pub predict: bool,
    pub evaluate: bool,
    pub report: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            gapfill: true,
            features: true,
            classify: true,
            cwm: true,
            train: true,
            predict: true,
            evaluate: false,
            report: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    /// Raw trait table, read when the gapfill stage runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    /// Already imputed table, read when the gapfill stage is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imputed: Option<PathBuf>,
    /// `index.json` of the fine image stack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_stack: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_stack: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation: Option<PathBuf>,
    /// Directory holding `BIO1.tsr` .. `BIO19.tsr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub climate_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapfillSection {
    pub outlier_k: f64,
    pub exclude_forms: Vec<GrowthForm>,
    pub grid: HyperGrid,
    pub folds: usize,
    pub min_node_size: usize,
}

impl Default for GapfillSection {
    fn default() -> Self {
        GapfillSection {
            outlier_k: 1.5,
            exclude_forms: vec![GrowthForm::Fern, GrowthForm::Crop],
            grid: HyperGrid::default(),
            folds: 10,
            min_node_size: crate::forest::DEFAULT_MIN_NODE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    pub roles: BandRoles,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub years: Option<(i32, i32)>,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        FeaturesSection {
            roles: default_roles(),
            years: None,
        }
    }
}

/// Band roles of the synthetic stacks.
pub fn default_roles() -> BandRoles {
    BandRoles {
        reflectance: ["blue", "red", "nir", "swir"].map(String::from).to_vec(),
        red: "red".into(),
        nir: "nir".into(),
        blue: "blue".into(),
        swir: "swir".into(),
        lst: Some("lst".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub per_class: usize,
    pub threshold: f64,
    pub classifier: ClassifierParams,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection {
            per_class: 200,
            threshold: DEFAULT_QUALITY_THRESHOLD,
            classifier: ClassifierParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: Method,
    pub traits: Vec<LeafTrait>,
    pub train_fraction: f64,
    pub realizations: usize,
    pub grids: MethodGrids,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: Method::Rf,
            traits: LeafTrait::ALL.to_vec(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            realizations: DEFAULT_REALIZATIONS,
            grids: MethodGrids::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub methods: Vec<Method>,
    pub robustness_fractions: Vec<f64>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            methods: Method::ALL.to_vec(),
            robustness_fractions: vec![0.1, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub lat_bin_deg: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { lat_bin_deg: 0.5 }
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl PipelineConfig {
    /// Defaults for every section around the given inputs.
    pub fn new(seed: u64, output_dir: PathBuf, inputs: InputPaths) -> Self {
        PipelineConfig {
            seed,
            threads: None,
            output_dir,
            stages: StageToggles::default(),
            inputs,
            gapfill: GapfillSection::default(),
            features: FeaturesSection::default(),
            classify: ClassifySection::default(),
            cwm: CwmConfig::default(),
            train: TrainSection::default(),
            evaluate: EvaluateSection::default(),
            report: ReportSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let i = &mut self.inputs;
        for p in [
            &mut i.table,
            &mut i.imputed,
            &mut i.fine_stack,
            &mut i.coarse_stack,
            &mut i.reference,
            &mut i.quality,
            &mut i.elevation,
            &mut i.climate_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        let g = &self.gapfill;
        if !(g.outlier_k.is_finite() && g.outlier_k > 0.0) {
            return bad(format!("gapfill.outlier_k must be positive, got {}", g.outlier_k));
        }
        if g.folds < 2 {
            return bad("gapfill.folds must be at least 2");
        }
        if g.min_node_size == 0 {
            return bad("gapfill.min_node_size must be at least 1");
        }
        g.grid.validate()?;
        if let Some((a, b)) = self.features.years {
            if a > b {
                return bad(format!("features.years [{a}, {b}] is empty"));
            }
        }
        let c = &self.classify;
        if c.per_class == 0 {
            return bad("classify.per_class must be at least 1");
        }
        if !(0.0..=1.0).contains(&c.threshold) {
            return bad(format!("classify.threshold must lie in [0, 1], got {}", c.threshold));
        }
        if c.classifier.n_trees == 0 || c.classifier.max_splits == 0 || c.classifier.min_node_size == 0 {
            return bad("classify.classifier counts must be positive");
        }
        self.cwm.validate()?;
        let t = &self.train;
        if t.traits.is_empty() {
            return bad("train.traits must not be empty");
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return bad(format!("train.train_fraction must lie in (0, 1), got {}", t.train_fraction));
        }
        if t.realizations == 0 {
            return bad("train.realizations must be at least 1");
        }
        t.grids.validate()?;
        let e = &self.evaluate;
        if e.methods.is_empty() {
            return bad("evaluate.methods must not be empty");
        }
        if e.robustness_fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("evaluate.robustness_fractions must lie in (0, 1)");
        }
        if !(self.report.lat_bin_deg.is_finite() && self.report.lat_bin_deg > 0.0) {
            return bad("report.lat_bin_deg must be positive");
        }
        Ok(())
    }
}
