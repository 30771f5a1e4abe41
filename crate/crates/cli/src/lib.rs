//! `hemulab` command-line tool. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use hemulab::config::RunConfig;
use hemulab::geo::solar::{parse_utc, sun_position};
use hemulab::geo::GeoError;
use hemulab::model::ModelKind;
use hemulab::pipeline::{self, RunDir};
use hemulab::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "hemulab", version, about = "Surface solar radiation emulator on synthetic satellite scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured scene into <run>/dataset/.
    Simulate(Common),
    /// Train the configured model and keep the best-validation checkpoint.
    Train(ModelArgs),
    /// Score a checkpoint on the test years.
    Evaluate(CheckpointArgs),
    /// Train one model per context length, albedo flag and seed.
    ContextSweep(Common),
    /// Re-train without each input feature in turn.
    Ablate(ModelArgs),
    /// Permutation feature importance of a checkpoint.
    PermImportance(CheckpointArgs),
    /// Print solar zenith and azimuth in degrees.
    Solar(SolarArgs),
    /// Write slope, aspect, shadow and f_corr rasters of the scene terrain.
    Terrain(TerrainArgs),
    /// Render RMSE grids from the reports of an earlier run.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene seed for `simulate`, training seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent trainings in sweeps and ablations.
    #[arg(long)]
    jobs: Option<usize>,
    /// Root of the run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dataset directory, run directory or `latest`; simulated in memory when omitted.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    context_length: Option<usize>,
    #[arg(long, overrides_with = "no_albedo")]
    with_albedo: bool,
    #[arg(long, overrides_with = "with_albedo")]
    no_albedo: bool,
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory, run directory, or `best` for the newest run's.
    #[arg(long, default_value = "best")]
    checkpoint: String,
}

#[derive(Args, Debug)]
struct SolarArgs {
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    /// UTC time, e.g. 2019-06-21T11:00Z.
    #[arg(long)]
    time: String,
}

#[derive(Args, Debug)]
struct TerrainArgs {
    #[command(flatten)]
    common: Common,
    /// UTC time of the sun position.
    #[arg(long)]
    time: String,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory whose reports are rendered.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelChoice {
    Tsvit,
    Convresnet,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Geo(GeoError::InvalidTimestamp(_) | GeoError::InvalidArgument(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = cfg;
    if let Some(j) = common.jobs {
        cfg.eval.jobs = j;
    }
    Ok(cfg)
}

fn with_training_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.baseline_train.seed = s;
        cfg.eval.seeds = vec![s];
    }
    cfg
}

fn apply_model_args(mut cfg: RunConfig, a: &ModelArgs) -> RunConfig {
    if let Some(t) = a.context_length {
        cfg.dataset.context = t;
    }
    if a.with_albedo {
        cfg.dataset.albedo_as_input = true;
    }
    if a.no_albedo {
        cfg.dataset.albedo_as_input = false;
    }
    match a.model {
        Some(ModelChoice::Tsvit) => cfg.with_model_kind(ModelKind::Tsvit),
        Some(ModelChoice::Convresnet) => cfg.with_model_kind(ModelKind::Convresnet),
        None => cfg,
    }
}

fn finish(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the dataset named by `--dataset` and records it as a run input.
fn dataset_for(cfg: &RunConfig, common: &Common, inputs: &mut BTreeMap<String, String>) -> Result<hemulab::dataset::Dataset> {
    let dir = match &common.dataset {
        Some(spec) => Some(pipeline::resolve_dataset(&common.out, &cfg.name, spec)?),
        None => None,
    };
    inputs.insert("dataset".into(), dir.as_ref().map_or("simulated from scene config".into(), |d| d.display().to_string()));
    pipeline::load_dataset(cfg, dir.as_deref())
}

fn announce(run: &RunDir) {
    println!("run directory: {}", run.root.display());
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(c) => {
            let mut cfg = load_config(&c)?;
            if let Some(s) = c.seed {
                cfg.scene.seed = s;
            }
            let cfg = finish(cfg)?;
            let run = RunDir::create(&c.out, &cfg, "simulate", BTreeMap::new())?;
            let r = pipeline::simulate(&cfg, &run)?;
            announce(&run);
            println!("frames: {} on a {}x{} grid", r.frames, r.rows, r.cols);
        }
        Command::Train(a) => {
            let cfg = finish(apply_model_args(with_training_seed(load_config(&a.common)?, a.common.seed), &a))?;
            let mut inputs = BTreeMap::new();
            let ds = dataset_for(&cfg, &a.common, &mut inputs)?;
            let run = RunDir::create(&a.common.out, &cfg, "train", inputs)?;
            let s = pipeline::train_run(&cfg, &ds, &run)?;
            announce(&run);
            println!("best val MSE {:.6} at step {} of {}", s.best_val_mse, s.best_step, s.steps);
        }
        Command::Evaluate(a) => {
            let cfg = finish(with_training_seed(load_config(&a.common)?, a.common.seed))?;
            let ckpt = pipeline::resolve_checkpoint(&a.common.out, &cfg.name, &a.checkpoint)?;
            let mut inputs = BTreeMap::from([("checkpoint".to_string(), ckpt.display().to_string())]);
            let ds = dataset_for(&cfg, &a.common, &mut inputs)?;
            let run = RunDir::create(&a.common.out, &cfg, "evaluate", inputs)?;
            let r = pipeline::evaluate_run(&cfg, &ds, &run, &ckpt)?;
            announce(&run);
            println!("val MSE {:.6} (checkpoint {:.6})", r.val_mse, r.best_val_mse);
            let (m, c) = (r.test.binned.all(), r.climatology.binned.all());
            println!("test RMSE {:.2} MAE {:.2} MBE {:.2} W/m2; climatology RMSE {:.2}", m.rmse, m.mae, m.mbe, c.rmse);
        }
        Command::ContextSweep(c) => {
            let cfg = finish(with_training_seed(load_config(&c)?, c.seed))?;
            let mut inputs = BTreeMap::new();
            let ds = dataset_for(&cfg, &c, &mut inputs)?;
            let run = RunDir::create(&c.out, &cfg, "context-sweep", inputs)?;
            let t = pipeline::sweep_run(&cfg, &ds, &run)?;
            announce(&run);
            print!("{}", pipeline::sweep_summary_csv(&t));
        }
        Command::Ablate(a) => {
            let cfg = finish(apply_model_args(with_training_seed(load_config(&a.common)?, a.common.seed), &a))?;
            let mut inputs = BTreeMap::new();
            let ds = dataset_for(&cfg, &a.common, &mut inputs)?;
            let run = RunDir::create(&a.common.out, &cfg, "ablate", inputs)?;
            let t = pipeline::ablate_run(&cfg, &ds, &run)?;
            announce(&run);
            println!("noise band {:.4} W/m2", t.noise_band);
            for r in &t.rows {
                println!("{:<12} dMAE {:+.4}", r.feature.as_deref().unwrap_or("reference"), r.delta_mae);
            }
        }
        Command::PermImportance(a) => {
            let mut cfg = load_config(&a.common)?;
            if let Some(s) = a.common.seed {
                cfg.eval.perm_seed = s;
            }
            let cfg = finish(cfg)?;
            let ckpt = pipeline::resolve_checkpoint(&a.common.out, &cfg.name, &a.checkpoint)?;
            let mut inputs = BTreeMap::from([("checkpoint".to_string(), ckpt.display().to_string())]);
            let ds = dataset_for(&cfg, &a.common, &mut inputs)?;
            let run = RunDir::create(&a.common.out, &cfg, "perm-importance", inputs)?;
            let t = pipeline::perm_run(&cfg, &ds, &run, &ckpt)?;
            announce(&run);
            print!("{}", t.to_csv());
        }
        Command::Solar(a) => {
            let time = parse_utc(&a.time)?;
            let p = sun_position(a.lat, a.lon, &time)?;
            println!("zenith {:.4} azimuth {:.4}", p.zenith, p.azimuth);
        }
        Command::Terrain(a) => {
            let mut cfg = load_config(&a.common)?;
            if let Some(s) = a.common.seed {
                cfg.scene.seed = s;
            }
            let cfg = finish(cfg)?;
            let time = parse_utc(&a.time)?;
            let run = RunDir::create(&a.common.out, &cfg, "terrain", BTreeMap::new())?;
            let r = pipeline::terrain_run(&cfg, &run, time)?;
            announce(&run);
            println!(
                "sun zenith {:.3} azimuth {:.3}; shadowed {:.3}; mean f_corr {:.3}",
                r.sun.zenith, r.sun.azimuth, r.shadowed_fraction, r.f_corr_mean
            );
        }
        Command::Report(a) => {
            let cfg = finish(load_config(&a.common)?)?;
            if !Path::new(&a.run).is_dir() {
                return Err(Error::Config(format!("{} is not a run directory", a.run.display())));
            }
            let inputs = BTreeMap::from([("run".to_string(), a.run.display().to_string())]);
            let run = RunDir::create(&a.common.out, &cfg, "report", inputs)?;
            let files = pipeline::report_run(&a.run, &run)?;
            announce(&run);
            for f in files {
                println!("{f}");
            }
        }
    }
    Ok(())
}
