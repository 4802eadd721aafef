//! Stage orchestration over one run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::PipelineConfig;
use super::manifest::{collect_outputs, params_hash, sha256_hex, Manifest, StageRecord};
use super::report::emit_report;
use super::stages::{
    classify_files, compare_methods, cwm_files, features_from_paths, gapfill_files, predict_files, train_files,
    write_robustness_csv,
};
use crate::cwm::read_training_csv;
use crate::error::{Error, Result};
use crate::par;
use crate::raster::FeatureRaster;
use crate::seed::keyed_hash;
use crate::trait_table::LeafTrait;

pub const STAGE_ORDER: [&str; 8] = ["gapfill", "features", "classify", "cwm", "train", "predict", "evaluate", "report"];

/// Fixed locations of stage outputs inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout { root: root.to_path_buf() }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn imputed(&self) -> PathBuf {
        self.root.join("gapfill/imputed.csv")
    }

    pub fn gapfill_report(&self) -> PathBuf {
        self.root.join("gapfill/report.json")
    }

    pub fn fine_features(&self) -> PathBuf {
        self.root.join("features/fine")
    }

    pub fn coarse_features(&self) -> PathBuf {
        self.root.join("features/coarse")
    }

    pub fn classes(&self) -> PathBuf {
        self.root.join("classify/classes.tsr")
    }

    pub fn abundance(&self) -> PathBuf {
        self.root.join("classify/abundance.tsr")
    }

    pub fn classify_report(&self) -> PathBuf {
        self.root.join("classify/report.json")
    }

    pub fn cwm(&self) -> PathBuf {
        self.root.join("cwm/cwm.csv")
    }

    pub fn model(&self, t: LeafTrait) -> PathBuf {
        self.root.join(format!("train/model_{}.bin", t.column()))
    }

    pub fn train_report(&self, t: LeafTrait) -> PathBuf {
        self.root.join(format!("train/eval_{}.json", t.column()))
    }

    pub fn trait_map(&self, t: LeafTrait) -> PathBuf {
        self.root.join(format!("predict/{}.tsr", t.column()))
    }

    pub fn stderr_map(&self, t: LeafTrait) -> PathBuf {
        self.root.join(format!("predict/{}_stderr.tsr", t.column()))
    }

    pub fn comparison(&self, t: LeafTrait) -> PathBuf {
        self.root.join(format!("evaluate/comparison_{}.json", t.column()))
    }

    pub fn robustness(&self, t: LeafTrait) -> PathBuf {
        self.root.join(format!("evaluate/robustness_{}.csv", t.column()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("inputs.{what} is required by an enabled stage")))
}

/// Per-stage seed, derived from the run seed and the stage name.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    keyed_hash(seed, stage.as_bytes())
}

fn enabled(cfg: &PipelineConfig, stage: &str) -> bool {
    let s = &cfg.stages;
    match stage {
        "gapfill" => s.gapfill,
        "features" => s.features,
        "classify" => s.classify,
        "cwm" => s.cwm,
        "train" => s.train,
        "predict" => s.predict,
        "evaluate" => s.evaluate,
        "report" => s.report,
        _ => false,
    }
}

/// Check that every enabled stage has its external inputs configured.
pub fn check_inputs(cfg: &PipelineConfig) -> Result<()> {
    let i = &cfg.inputs;
    if cfg.stages.gapfill {
        required(&i.table, "table")?;
    }
    if cfg.stages.features {
        required(&i.fine_stack, "fine_stack")?;
        required(&i.coarse_stack, "coarse_stack")?;
    }
    if cfg.stages.classify {
        required(&i.reference, "reference")?;
        required(&i.quality, "quality")?;
    }
    if cfg.stages.cwm && !cfg.stages.gapfill {
        required(&i.imputed, "imputed")?;
    }
    Ok(())
}

fn run_stage(cfg: &PipelineConfig, layout: &RunLayout, stage: &str, seed: u64) -> Result<String> {
    let i = &cfg.inputs;
    match stage {
        "gapfill" => {
            gapfill_files(
                required(&i.table, "table")?,
                &layout.imputed(),
                &layout.gapfill_report(),
                &cfg.gapfill,
                seed,
            )?;
            params_hash(&cfg.gapfill)
        }
        "features" => {
            let section = &cfg.features;
            let elevation = i.elevation.as_deref();
            let climate = i.climate_dir.as_deref();
            features_from_paths(required(&i.fine_stack, "fine_stack")?, elevation, climate, section)?
                .save(&layout.fine_features())?;
            features_from_paths(required(&i.coarse_stack, "coarse_stack")?, elevation, climate, section)?
                .save(&layout.coarse_features())?;
            params_hash(section)
        }
        "classify" => {
            let coarse = FeatureRaster::load(&layout.coarse_features())?.geometry;
            classify_files(
                &layout.fine_features(),
                required(&i.reference, "reference")?,
                required(&i.quality, "quality")?,
                &coarse,
                &layout.classes(),
                &layout.abundance(),
                &layout.classify_report(),
                &cfg.classify,
                seed,
            )?;
            params_hash(&cfg.classify)
        }
        "cwm" => {
            let imputed = match (&i.imputed, cfg.stages.gapfill) {
                (Some(p), false) => p.clone(),
                _ => layout.imputed(),
            };
            cwm_files(&layout.abundance(), &imputed, &layout.coarse_features(), &layout.cwm(), &cfg.cwm)?;
            params_hash(&cfg.cwm)
        }
        "train" => {
            for &t in &cfg.train.traits {
                train_files(&layout.cwm(), t, &layout.model(t), &layout.train_report(t), &cfg.train, seed)?;
            }
            params_hash(&cfg.train)
        }
        "predict" => {
            for &t in &cfg.train.traits {
                predict_files(&layout.model(t), &layout.coarse_features(), &layout.trait_map(t), &layout.stderr_map(t))?;
            }
            params_hash(&cfg.train.traits)
        }
        "evaluate" => {
            let set = read_training_csv(&layout.cwm())?;
            std::fs::create_dir_all(layout.stage_dir("evaluate")).map_err(|e| Error::io(layout.stage_dir("evaluate"), e))?;
            for &t in &cfg.train.traits {
                let rep = compare_methods(&set, t, &cfg.train, &cfg.evaluate, seed)?;
                let p = layout.comparison(t);
                std::fs::write(&p, serde_json::to_string_pretty(&rep)?).map_err(|e| Error::io(&p, e))?;
                write_robustness_csv(&layout.robustness(t), &rep.robustness)?;
            }
            #[derive(Serialize)]
            struct P<'a> {
                train: &'a super::config::TrainSection,
                evaluate: &'a super::config::EvaluateSection,
            }
            params_hash(&P {
                train: &cfg.train,
                evaluate: &cfg.evaluate,
            })
        }
        "report" => {
            emit_report(&layout.root, &cfg.train.traits, &cfg.report)?;
            params_hash(&cfg.report)
        }
        other => Err(Error::Config(format!("unknown stage `{other}`"))),
    }
}

/// Run every enabled stage in order into `cfg.output_dir`. A failing stage
/// aborts the run; the manifest written so far names it.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    check_inputs(cfg)?;
    par::with_threads(cfg.threads, || run_all(cfg))
}

fn run_all(cfg: &PipelineConfig) -> Result<Manifest> {
    let layout = RunLayout::new(&cfg.output_dir);
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let config_text = cfg.to_toml_string()?;
    let mut manifest = Manifest::new(cfg.seed, par::current_threads(), sha256_hex(config_text.as_bytes()));
    let cfg_copy = layout.root.join("config.toml");
    std::fs::write(&cfg_copy, &config_text).map_err(|e| Error::io(&cfg_copy, e))?;
    manifest.save(&layout.root)?;
    for stage in STAGE_ORDER {
        if !enabled(cfg, stage) {
            continue;
        }
        let dir = layout.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let seed = stage_seed(cfg.seed, stage);
        let start = Instant::now();
        match run_stage(cfg, &layout, stage, seed) {
            Ok(params_hash) => {
                manifest.stages.push(StageRecord {
                    name: stage.to_string(),
                    seed,
                    params_hash,
                    wall_seconds: start.elapsed().as_secs_f64(),
                    outputs: collect_outputs(&layout.root, stage)?,
                });
                manifest.save(&layout.root)?;
            }
            Err(e) => {
                manifest.failed_stage = Some(stage.to_string());
                manifest.error = Some(e.to_string());
                manifest.save(&layout.root)?;
                return Err(Error::Stage {
                    stage: stage.to_string(),
                    source: Box::new(e),
                });
            }
        }
    }
    manifest.complete = true;
    manifest.save(&layout.root)?;
    Ok(manifest)
}
