//! End-to-end orchestration: configuration, synthetic worlds, the stage
//! runner with its manifest, and report emission.

pub mod config;
pub mod manifest;
pub mod report;
pub mod run;
pub mod stages;
pub mod synth;

pub use config::{
    default_roles, ClassifySection, EvaluateSection, FeaturesSection, GapfillSection, InputPaths, PipelineConfig,
    ReportSection, StageToggles, TrainSection,
};
pub use manifest::{hash_file, verify_run, Discrepancy, Manifest, OutputEntry, StageRecord, MANIFEST_FILE};
pub use report::{emit_report, ReportSummary, TraitSummary};
pub use run::{check_inputs, run_pipeline, stage_seed, RunLayout, STAGE_ORDER};
pub use stages::*;
pub use synth::{load_synth_config, synth_world, world_pipeline_config, write_world, SynthConfig, SyntheticWorld, WorldFiles};
