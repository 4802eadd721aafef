use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use traitscale_core::cwm::{read_training_csv, CwmConfig};
use traitscale_core::par;
use traitscale_core::pipeline::{
    classify_files, coarse_geometry_for, compare_methods, cwm_files, emit_report, gapfill_files,
    load_synth_config, predict_files, run_pipeline, synth_world, train_files, verify_run,
    write_robustness_csv, write_world, ClassifySection, EvaluateSection, FeaturesJob,
    GapfillSection, PipelineConfig, ReportSection, RunLayout, SynthConfig, TrainSection,
};
use traitscale_core::raster::FeatureRaster;
use traitscale_core::regress::Method;
use traitscale_core::trait_table::LeafTrait;

#[derive(Parser)]
#[command(
    name = "traitscale",
    version,
    about = "Upscale in-situ leaf traits to gridded trait maps"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world.
    Synth(SynthArgs),
    /// Remove outliers and impute missing trait cells.
    Gapfill(GapfillArgs),
    /// Build an annual feature stack from an image stack.
    Features(FeaturesArgs),
    /// Classify PFTs at fine resolution and aggregate to abundance.
    Classify(ClassifyArgs),
    /// Build the community-weighted-mean training table.
    Cwm(CwmArgs),
    /// Evaluate one method on one trait and fit the delivered model.
    Train(TrainArgs),
    /// Predict a trait raster and its standard error.
    Predict(PredictArgs),
    /// Compare methods under the hold-out protocol.
    Evaluate(EvaluateArgs),
    /// Run every enabled stage from a pipeline config.
    Run(RunArgs),
    /// Write plot-data tables for a finished run.
    Report(ReportArgs),
    /// Re-hash a run directory against its manifest.
    Verify(VerifyArgs),
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Gapfill(_) => "gapfill",
            Command::Features(_) => "features",
            Command::Classify(_) => "classify",
            Command::Cwm(_) => "cwm",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Run(_) => "run",
            Command::Report(_) => "report",
            Command::Verify(_) => "verify",
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GapfillArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with gap-filling parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    quality: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    abundance: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    /// Feature directory whose grid defines the coarse abundance grid.
    #[arg(long, conflicts_with = "ratio")]
    coarse_features: Option<PathBuf>,
    /// Fine pixels per coarse pixel, when no coarse features are given.
    #[arg(long, default_value_t = 16)]
    ratio: usize,
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct CwmArgs {
    #[arg(long)]
    abundance: PathBuf,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = traitscale_core::cwm::DEFAULT_MAX_KM)]
    max_km: f64,
    #[arg(long, default_value_t = traitscale_core::cwm::DEFAULT_NEIGHBORS)]
    k: usize,
    #[arg(long, default_value_t = traitscale_core::cwm::DEFAULT_MIN_REPRESENTED)]
    min_represented: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cwm: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long = "trait")]
    leaf_trait: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with protocol settings and method grids.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stderr: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    cwm: PathBuf,
    #[arg(long = "trait")]
    leaf_trait: String,
    /// Comparison report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Robustness curve table (CSV).
    #[arg(long)]
    robustness: Option<PathBuf>,
    /// Comma-separated methods (default: all five).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated traits (default: every trait with a trained model).
    #[arg(long = "traits", value_delimiter = ',')]
    traits: Vec<String>,
    #[arg(long)]
    lat_bin_deg: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    run: PathBuf,
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn parse_trait(s: &str) -> Result<LeafTrait> {
    LeafTrait::ALL
        .into_iter()
        .find(|t| t.column().eq_ignore_ascii_case(s))
        .with_context(|| format!("unknown trait `{s}` (expected sla, ldmc, lnc, lpc or lnpr)"))
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(s.parse::<Method>()?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let cfg = match a.config.as_deref() {
                Some(path) => load_synth_config(path)?,
                None => SynthConfig::default(),
            };
            let world = synth_world(&cfg, a.seed)?;
            std::fs::create_dir_all(&a.out)?;
            write_world(&world, &a.out)?;
            println!("world written to {}", a.out.display());
        }
        Command::Gapfill(a) => {
            let section: GapfillSection = load_toml(a.params.as_deref())?;
            let rep = gapfill_files(&a.input, &a.out, &a.report, &section, a.seed)?;
            for row in &rep.table {
                println!("{}", row.join("\t"));
            }
        }
        Command::Features(a) => {
            let job = FeaturesJob::load(&a.config)?;
            let f = job.run()?;
            println!("{} bands written to {}", f.names.len(), job.out.display());
        }
        Command::Classify(a) => {
            let section: ClassifySection = load_toml(a.params.as_deref())?;
            let coarse = match &a.coarse_features {
                Some(dir) => FeatureRaster::load(dir)?.geometry,
                None => coarse_geometry_for(&FeatureRaster::load(&a.features)?.geometry, a.ratio)?,
            };
            let rep = classify_files(
                &a.features,
                &a.reference,
                &a.quality,
                &coarse,
                &a.out,
                &a.abundance,
                &a.report,
                &section,
                a.seed,
            )?;
            println!("accuracy {:.4} kappa {:?}", rep.accuracy, rep.kappa);
        }
        Command::Cwm(a) => {
            let config = CwmConfig {
                max_km: a.max_km,
                k: a.k,
                min_represented: a.min_represented,
            };
            let s = cwm_files(&a.abundance, &a.records, &a.features, &a.out, &config)?;
            println!(
                "{} samples ({} rejected, {} dropped for nodata)",
                s.samples, s.rejected, s.dropped_nodata
            );
        }
        Command::Train(a) => {
            let mut section: TrainSection = load_toml(a.params.as_deref())?;
            section.method = parse_method(&a.method)?;
            let t = parse_trait(&a.leaf_trait)?;
            let rep = train_files(&a.cwm, t, &a.out, &a.report, &section, a.seed)?;
            println!(
                "{} {}: R {:?} RMSE {:.4} over {} realizations",
                rep.method,
                t.label(),
                rep.evaluation.r_mean,
                rep.evaluation.rmse_mean,
                rep.evaluation.realizations.len()
            );
        }
        Command::Predict(a) => predict_files(&a.model, &a.features, &a.out, &a.stderr)?,
        Command::Evaluate(a) => {
            #[derive(serde::Deserialize, Default)]
            #[serde(deny_unknown_fields, default)]
            struct Params {
                train: TrainSection,
                evaluate: EvaluateSection,
            }
            let mut p: Params = load_toml(a.params.as_deref())?;
            if !a.methods.is_empty() {
                p.evaluate.methods = a
                    .methods
                    .iter()
                    .map(|m| parse_method(m))
                    .collect::<Result<_>>()?;
            }
            if !a.fractions.is_empty() {
                p.evaluate.robustness_fractions = a.fractions.clone();
            }
            if a.robustness.is_none() {
                p.evaluate.robustness_fractions.clear();
            }
            let t = parse_trait(&a.leaf_trait)?;
            let set = read_training_csv(&a.cwm)?;
            let rep = compare_methods(&set, t, &p.train, &p.evaluate, a.seed)?;
            write_json(&a.out, &rep)?;
            if let Some(path) = &a.robustness {
                write_robustness_csv(path, &rep.robustness)?;
            }
            for r in &rep.reports {
                println!("{}\tR {:?}\tRMSE {:.4}", r.method, r.r_mean, r.rmse_mean);
            }
        }
        Command::Run(a) => {
            let cfg = PipelineConfig::load(&a.config)?;
            let m = run_pipeline(&cfg)?;
            for s in &m.stages {
                println!(
                    "{}\t{:.2}s\t{} outputs",
                    s.name,
                    s.wall_seconds,
                    s.outputs.len()
                );
            }
        }
        Command::Report(a) => {
            let layout = RunLayout::new(&a.run);
            let traits: Vec<LeafTrait> = if a.traits.is_empty() {
                LeafTrait::ALL
                    .into_iter()
                    .filter(|&t| layout.train_report(t).exists())
                    .collect()
            } else {
                a.traits
                    .iter()
                    .map(|t| parse_trait(t))
                    .collect::<Result<_>>()?
            };
            if traits.is_empty() {
                bail!("no trained traits found in {}", a.run.display());
            }
            let mut section = ReportSection::default();
            if let Some(b) = a.lat_bin_deg {
                section.lat_bin_deg = b;
            }
            let s = emit_report(&a.run, &traits, &section)?;
            for t in &s.traits {
                println!(
                    "{}\tR {:?}\tRMSE {:.4}\tn_test {}",
                    t.leaf_trait.label(),
                    t.r_mean,
                    t.rmse_mean,
                    t.n_test
                );
            }
        }
        Command::Verify(a) => {
            let problems = verify_run(&a.run)?;
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("{p:?}");
                }
                bail!("{} output(s) do not match the manifest", problems.len());
            }
            println!("all outputs match the manifest");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match par::with_threads(cli.threads, || execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("traitscale {stage}: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
