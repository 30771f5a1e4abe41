//! Run directories and the stage runners behind the command-line tool.
//!
//! Layout: `<out>/<name>/<timestamp>/{config.json, manifest.json,
//! logs.jsonl, checkpoints/, reports/}`. Reports and checkpoints carry no
//! paths or clock readings, so two single-threaded runs of the same config
//! produce identical bytes; `manifest.json` holds the run-specific parts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hemulab_geo::raster::{write_raster, Raster};
use hemulab_geo::solar::{sun_position, sun_vector, SunPosition};
use hemulab_geo::synthetic::synthetic_dem;
use hemulab_geo::terrain::terrain_features;

use crate::checkpoint::{self, CheckpointManifest};
use crate::config::{desk_tsvit, RunConfig};
use crate::dataset::{window_ends, Dataset, Split, WindowReader, WindowSpec};
use crate::evaluation::{
    context_sweep, feature_ablation, mean_sd, permutation_importance, results_csv, AblationTable, Experiment, ImportanceTable,
    PermutationSamples, RunResult, SweepTable,
};
use crate::model::{Model, ModelConfig};
use crate::parallel;
use crate::scene::generate;
use crate::training::{fit_model, validation_mse, LogRecord, TrainConfig};
use crate::{Error, Result};

pub const RUN_FORMAT: &str = "hemulab-run/1";
pub const DATASET_DIR: &str = "dataset";
pub const BEST_CHECKPOINT: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub name: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    /// Worker cap in effect (`HEMULAB_THREADS`).
    pub threads: usize,
    pub created: DateTime<Utc>,
    /// Datasets and checkpoints the run read.
    pub inputs: BTreeMap<String, String>,
}

/// One run's output directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates `<out>/<name>/<timestamp>/` and writes `config.json` and
    /// `manifest.json`.
    pub fn create(out: &Path, cfg: &RunConfig, command: &str, inputs: BTreeMap<String, String>) -> Result<RunDir> {
        let created = Utc::now();
        let parent = out.join(&cfg.name);
        let stamp = created.format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let mut root = parent.join(&stamp);
        let mut k = 1;
        while root.exists() {
            root = parent.join(format!("{stamp}-{k}"));
            k += 1;
        }
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("reports"))?;
        fs::write(root.join("config.json"), cfg.to_json()?)?;
        let seeds = BTreeMap::from([
            ("scene".to_string(), cfg.scene.seed),
            ("train".to_string(), cfg.train.seed),
            ("baseline_train".to_string(), cfg.baseline_train.seed),
            ("pixel".to_string(), cfg.eval.pixel_seed),
            ("permutation".to_string(), cfg.eval.perm_seed),
        ]);
        let manifest = RunManifest {
            format: RUN_FORMAT.into(),
            command: command.into(),
            name: cfg.name.clone(),
            config_hash: cfg.hash()?,
            seeds,
            version: env!("CARGO_PKG_VERSION").into(),
            threads: parallel::threads(),
            created,
            inputs,
        };
        fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(RunDir { root })
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join(DATASET_DIR)
    }

    pub fn write_report(&self, file: &str, contents: &str) -> Result<PathBuf> {
        let p = self.reports().join(file);
        fs::write(&p, contents)?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<PathBuf> {
        self.write_report(file, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn append_logs<'r>(&self, records: impl IntoIterator<Item = &'r LogRecord>, tag: &Value) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.root.join("logs.jsonl"))?;
        for r in records {
            let mut v = serde_json::to_value(r)?;
            if let (Value::Object(m), Value::Object(t)) = (&mut v, tag) {
                m.extend(t.clone());
            }
            writeln!(f, "{}", serde_json::to_string(&v)?)?;
        }
        Ok(())
    }
}

/// Run directories under `<out>/<name>/`, oldest first.
pub fn list_runs(out: &Path, name: &str) -> Result<Vec<PathBuf>> {
    let dir = out.join(name);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    runs.sort();
    Ok(runs)
}

/// Resolves `spec` to a checkpoint directory: a checkpoint, a run directory
/// (its best checkpoint), or `best` for the newest run of `name` that has one.
pub fn resolve_checkpoint(out: &Path, name: &str, spec: &str) -> Result<PathBuf> {
    if spec == BEST_CHECKPOINT || spec == "latest" {
        return list_runs(out, name)?
            .into_iter()
            .rev()
            .map(|r| r.join("checkpoints").join(BEST_CHECKPOINT))
            .find(|c| c.join(checkpoint::BLOB_FILE).is_file())
            .ok_or_else(|| Error::Config(format!("no run under {} has a best checkpoint", out.join(name).display())));
    }
    let p = PathBuf::from(spec);
    if p.join(checkpoint::BLOB_FILE).is_file() {
        return Ok(p);
    }
    let best = p.join("checkpoints").join(BEST_CHECKPOINT);
    if best.join(checkpoint::BLOB_FILE).is_file() {
        return Ok(best);
    }
    Err(Error::Config(format!("{spec} is neither a checkpoint nor a run directory with one")))
}

/// Resolves `spec` to a dataset directory: a dataset, a run directory
/// holding one, or `latest` for the newest run of `name` that has one.
pub fn resolve_dataset(out: &Path, name: &str, spec: &str) -> Result<PathBuf> {
    if spec == "latest" {
        return list_runs(out, name)?
            .into_iter()
            .rev()
            .map(|r| r.join(DATASET_DIR))
            .find(|d| d.join("manifest.json").is_file())
            .ok_or_else(|| Error::Config(format!("no run under {} has a dataset", out.join(name).display())));
    }
    let p = PathBuf::from(spec);
    if p.join(DATASET_DIR).join("manifest.json").is_file() {
        return Ok(p.join(DATASET_DIR));
    }
    if p.join("manifest.json").is_file() {
        return Ok(p);
    }
    Err(Error::Config(format!("{spec} is neither a dataset nor a run directory with one")))
}

/// Reads the dataset at `dir`, or simulates the configured scene, then adds
/// the configured dummy channel.
pub fn load_dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    let ds = match dir {
        Some(d) => Dataset::read(d)?,
        None => generate(&cfg.scene)?,
    };
    match &cfg.dataset.dummy_channel {
        Some(name) => ds.with_dummy_channel(name),
        None => Ok(ds),
    }
}

/// Shared experiment settings for `ds`.
pub fn experiment<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<Experiment<'a>> {
    let model = match &cfg.model {
        ModelConfig::Tsvit(_) => cfg.model.clone(),
        ModelConfig::Convresnet(_) => ModelConfig::Tsvit(desk_tsvit()),
    };
    let exp = Experiment {
        ds,
        splits: ds.split()?,
        model,
        baseline: cfg.baseline.clone(),
        train: cfg.train.clone(),
        baseline_train: cfg.baseline_train.clone(),
        eval: cfg.eval.clone(),
    };
    exp.validate()?;
    Ok(exp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub config_hash: String,
    pub generator_config_hash: String,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub variables: Vec<String>,
}

/// Simulates the scene into `<run>/dataset/`.
pub fn simulate(cfg: &RunConfig, run: &RunDir) -> Result<SimulateReport> {
    let ds = generate(&cfg.scene)?;
    ds.write(&run.dataset())?;
    let report = SimulateReport {
        config_hash: cfg.hash()?,
        generator_config_hash: ds.manifest.generator_config_hash.clone(),
        frames: ds.n_frames(),
        rows: ds.rows(),
        cols: ds.cols(),
        variables: ds.manifest.variables.iter().map(|v| v.name.clone()).collect(),
    };
    run.write_json("simulate.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub dataset_hash: String,
    pub model: String,
    pub context: usize,
    pub channels: Vec<String>,
    pub seed: u64,
    pub best_val_mse: f64,
    pub best_step: usize,
    pub steps: usize,
    pub final_lr: f64,
    /// `(step, validation MSE)` pairs.
    pub val_curve: Vec<(usize, f64)>,
}

fn checkpoint_metadata(cfg: &RunConfig, ds: &Dataset, spec: &WindowSpec, train: &TrainConfig, rec: &LogRecord) -> Result<BTreeMap<String, Value>> {
    Ok(BTreeMap::from([
        ("config_hash".to_string(), json!(cfg.hash()?)),
        ("dataset_hash".to_string(), json!(ds.manifest.generator_config_hash)),
        ("channels".to_string(), json!(spec.channels)),
        ("train".to_string(), serde_json::to_value(train)?),
        ("step".to_string(), json!(rec.step)),
        ("val_mse".to_string(), json!(rec.loss)),
    ]))
}

/// Trains the configured model, saving `checkpoints/best/` at every
/// validation improvement.
pub fn train_run(cfg: &RunConfig, ds: &Dataset, run: &RunDir) -> Result<TrainSummary> {
    let spec = cfg.window_spec(ds);
    let train = cfg.train_for_model().clone();
    let splits = ds.split()?;
    let mut model = Model::new(&cfg.model_for(&spec), train.seed)?;
    let best_dir = run.checkpoints().join(BEST_CHECKPOINT);
    let report = fit_model(&mut model, WindowReader::new(ds, &spec)?, &splits, &train, |m, rec| {
        checkpoint::save(&best_dir, m, train.seed, checkpoint_metadata(cfg, ds, &spec, &train, rec)?)
    })?;
    run.append_logs(&report.log, &json!({ "stage": "train" }))?;
    let summary = TrainSummary {
        config_hash: cfg.hash()?,
        dataset_hash: ds.manifest.generator_config_hash.clone(),
        model: model.kind().as_str().into(),
        context: spec.context,
        channels: spec.channels.clone(),
        seed: train.seed,
        best_val_mse: report.best_val_mse,
        best_step: report.best_step,
        steps: report.steps,
        final_lr: report.final_lr,
        val_curve: report.log.iter().filter(|r| r.split == "val").map(|r| (r.step, r.loss)).collect(),
    };
    run.write_json("train.json", &summary)?;
    Ok(summary)
}

/// A checkpoint with the windows and training settings it was fitted on.
pub struct LoadedCheckpoint {
    pub model: Model,
    pub manifest: CheckpointManifest,
    pub spec: WindowSpec,
    pub train: TrainConfig,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let (model, manifest) = checkpoint::load(dir)?;
    let field = |k: &str| manifest.metadata.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")));
    let channels: Vec<String> = serde_json::from_value(field("channels")?)?;
    let train: TrainConfig = serde_json::from_value(field("train")?)?;
    let spec = WindowSpec { context: manifest.config.context(), channels };
    Ok(LoadedCheckpoint { model, manifest, spec, train })
}

fn require_channels(ds: &Dataset, spec: &WindowSpec) -> Result<()> {
    match spec.channels.iter().find(|c| !ds.has_var(c)) {
        Some(c) => Err(Error::Config(format!("dataset lacks channel {c} the checkpoint was trained on"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub dataset_hash: String,
    /// Validation MSE stored with the checkpoint.
    pub best_val_mse: f64,
    /// Validation MSE recomputed from the loaded parameters.
    pub val_mse: f64,
    pub test: RunResult,
    pub climatology: RunResult,
}

/// Scores a checkpoint on the test years next to the climatology.
pub fn evaluate_run(cfg: &RunConfig, ds: &Dataset, run: &RunDir, ckpt: &Path) -> Result<EvalReport> {
    let loaded = load_checkpoint(ckpt)?;
    require_channels(ds, &loaded.spec)?;
    let mut exp = experiment(cfg, ds)?;
    if !exp.eval.contexts.contains(&loaded.spec.context) {
        exp.eval.contexts.push(loaded.spec.context);
    }
    let val_mse = validation_mse(&loaded.model, WindowReader::new(ds, &loaded.spec)?, &exp.splits, &loaded.train)?;
    let best_val_mse = loaded.manifest.metadata.get("val_mse").and_then(Value::as_f64).unwrap_or(f64::NAN);
    let albedo = loaded.spec.channels.iter().any(|c| c == crate::dataset::ALBEDO);
    let test = exp.score(&loaded.model, &loaded.spec, loaded.manifest.seed, albedo, Some(best_val_mse))?;
    let report = EvalReport {
        config_hash: cfg.hash()?,
        dataset_hash: ds.manifest.generator_config_hash.clone(),
        best_val_mse,
        val_mse,
        test,
        climatology: exp.climatology()?,
    };
    run.write_json("eval.json", &report)?;
    run.write_report("eval.csv", &results_csv([&report.test, &report.climatology]))?;
    run.write_report("rmse_grid.csv", &report.test.binned.rmse_grid_csv())?;
    Ok(report)
}

/// Seed mean and spread of RMSE per (albedo flag, context, α bin, k_T* bin).
pub fn sweep_summary_csv(table: &SweepTable) -> String {
    let mut s = String::from("model,albedo,context,alpha_bin,kt_bin,seeds,rmse_mean,rmse_sd\n");
    let mut keys: Vec<(bool, usize)> = table.rows.iter().map(|r| (r.albedo, r.context)).collect();
    keys.dedup();
    keys.sort();
    keys.dedup();
    let Some(first) = table.rows.first() else { return s };
    for (albedo, context) in keys {
        for a in &first.binned.alpha_labels {
            for k in &first.binned.kt_labels {
                let v = table.rmse_by_seed(context, albedo, a, k);
                if v.is_empty() {
                    continue;
                }
                let (m, sd) = mean_sd(&v);
                writeln!(s, "tsvit,{albedo},{context},\"{a}\",\"{k}\",{},{m:.6},{sd:.6}", v.len()).unwrap();
            }
        }
    }
    s
}

/// Trains and scores every (context, albedo flag, seed) combination.
pub fn sweep_run(cfg: &RunConfig, ds: &Dataset, run: &RunDir) -> Result<SweepTable> {
    let exp = experiment(cfg, ds)?;
    let table = context_sweep(&exp)?;
    run.write_json("sweep.json", &table)?;
    run.write_report("sweep.csv", &table.to_csv())?;
    run.write_report("sweep_summary.csv", &sweep_summary_csv(&table))?;
    Ok(table)
}

/// Re-trains the configured model without each input channel in turn.
pub fn ablate_run(cfg: &RunConfig, ds: &Dataset, run: &RunDir) -> Result<AblationTable> {
    let exp = experiment(cfg, ds)?;
    let spec = WindowSpec::new(ds, cfg.dataset.context, cfg.dataset.albedo_as_input);
    let table = feature_ablation(&exp, &spec, &spec.channels, cfg.train.seed)?;
    run.write_json("ablation.json", &table)?;
    run.write_report("ablation.csv", &table.to_csv())?;
    Ok(table)
}

/// Permutation importance of every input channel of a checkpoint.
pub fn perm_run(cfg: &RunConfig, ds: &Dataset, run: &RunDir, ckpt: &Path) -> Result<ImportanceTable> {
    let loaded = load_checkpoint(ckpt)?;
    require_channels(ds, &loaded.spec)?;
    let splits = ds.split()?;
    let reader = WindowReader::new(ds, &loaded.spec)?;
    let (ends, _) = window_ends(&splits, Split::Test, loaded.spec.context);
    let ends: Vec<usize> = ends.into_iter().step_by(cfg.eval.perm_frame_stride).collect();
    let tile = match loaded.model.config() {
        ModelConfig::Tsvit(c) => (c.h, c.w),
        ModelConfig::Convresnet(_) => (cfg.eval.perm_tile, cfg.eval.perm_tile),
    };
    let samples = PermutationSamples::new(&reader, &ends, tile)?;
    let table = permutation_importance(&loaded.model, &samples, &loaded.spec.channels, cfg.eval.perm_repeats, cfg.eval.perm_seed)?;
    run.write_json("importance.json", &table)?;
    run.write_report("importance.csv", &table.to_csv())?;
    Ok(table)
}

/// Renders RMSE grids (rows: k_T* bins, columns: α bins) from the reports
/// of an earlier run; returns the written file names.
pub fn report_run(source: &Path, run: &RunDir) -> Result<Vec<String>> {
    let reports = source.join("reports");
    let mut written = Vec::new();
    let eval = reports.join("eval.json");
    if eval.is_file() {
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(eval)?)?;
        for res in [&r.test, &r.climatology] {
            let file = format!("rmse_grid_{}.csv", result_tag(res));
            run.write_report(&file, &res.binned.rmse_grid_csv())?;
            written.push(file);
        }
    }
    let sweep = reports.join("sweep.json");
    if sweep.is_file() {
        let t: SweepTable = serde_json::from_str(&fs::read_to_string(sweep)?)?;
        for res in t.rows.iter().chain(&t.baselines).chain([&t.climatology]) {
            let file = format!("rmse_grid_{}.csv", result_tag(res));
            run.write_report(&file, &res.binned.rmse_grid_csv())?;
            written.push(file);
        }
        run.write_report("sweep_summary.csv", &sweep_summary_csv(&t))?;
        written.push("sweep_summary.csv".into());
    }
    if written.is_empty() {
        return Err(Error::Config(format!("{} holds no eval.json or sweep.json", reports.display())));
    }
    Ok(written)
}

fn result_tag(r: &RunResult) -> String {
    if r.model == "climatology" {
        return r.model.clone();
    }
    format!("{}_T{}_{}_seed{}", r.model, r.context, if r.albedo { "albedo" } else { "noalbedo" }, r.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainReport {
    pub time: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub sun: SunPositionRecord,
    pub shadowed_fraction: f64,
    pub f_corr_mean: f64,
    pub rasters: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunPositionRecord {
    pub zenith: f64,
    pub azimuth: f64,
}

impl From<SunPosition> for SunPositionRecord {
    fn from(p: SunPosition) -> Self {
        SunPositionRecord { zenith: p.zenith, azimuth: p.azimuth }
    }
}

/// Terrain features of the scene's DEM for the sun at the grid centre at
/// `time`, written as rasters under `reports/terrain/`.
pub fn terrain_run(cfg: &RunConfig, run: &RunDir, time: DateTime<Utc>) -> Result<TerrainReport> {
    let sc = &cfg.scene;
    sc.validate()?;
    let dem = synthetic_dem(sc.dem, sc.rows, sc.cols, sc.cell_size, sc.seed)?;
    let lat = sc.lat_north - sc.dlat * sc.rows as f64 / 2.0;
    let lon = sc.lon_west + sc.dlon * sc.cols as f64 / 2.0;
    let pos = sun_position(lat, lon, &time)?;
    let tf = terrain_features(&dem, sun_vector(pos))?;
    let dir = run.reports().join("terrain");
    let origin = [dem.origin.0, dem.origin.1];
    let layers: [(&str, &Raster); 6] = [
        ("dem", &dem.elevation),
        ("slope", &tf.slope),
        ("aspect_sin", &tf.aspect_sin),
        ("aspect_cos", &tf.aspect_cos),
        ("shadow", &tf.shadow),
        ("f_corr", &tf.f_corr.values),
    ];
    for (stem, r) in layers {
        write_raster(&dir, stem, r, dem.cell_size, origin)?;
    }
    let n = tf.shadow.data().len() as f64;
    let report = TerrainReport {
        time,
        lat,
        lon,
        sun: pos.into(),
        shadowed_fraction: tf.shadow.data().iter().map(|&v| v as f64).sum::<f64>() / n,
        f_corr_mean: tf.f_corr.values.data().iter().map(|&v| v as f64).sum::<f64>() / n,
        rasters: layers.iter().map(|(s, _)| format!("terrain/{s}.json")).collect(),
    };
    run.write_json("terrain.json", &report)?;
    Ok(report)
}
