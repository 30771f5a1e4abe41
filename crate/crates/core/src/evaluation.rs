//! Error metrics, albedo × clear-sky-index binning, and the context,
//! ablation and permutation experiments.

use std::fmt::Write as _;

use chrono::{Datelike, Timelike};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use hemulab_tensor::rng::substream;
use hemulab_tensor::Tensor;

use crate::conv::ConvResNetConfig;
use crate::dataset::{window_ends, Dataset, Split, Splits, WindowReader, WindowSpec, ALBEDO, TARGET};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::training::{fit_model, TrainConfig, TrainReport};
use crate::tsvit::{tile_apply, tile_origins};
use crate::{parallel, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mbe: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kt_bin: Option<String>,
    /// Share of all evaluated samples falling in this cell.
    pub fraction: f64,
    /// Mean elevation (m) of contributing pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_elevation: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Accum {
    n: usize,
    sum: f64,
    abs: f64,
    sq: f64,
    elev: f64,
}

impl Accum {
    fn add(&mut self, pred: f32, target: f32, elev: f32) {
        let e = pred as f64 - target as f64;
        self.n += 1;
        self.sum += e;
        self.abs += e.abs();
        self.sq += e * e;
        self.elev += elev as f64;
    }

    fn report(&self, total: usize, with_elevation: bool) -> Option<MetricsReport> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        Some(MetricsReport {
            mbe: self.sum / n,
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            n: self.n,
            alpha_bin: None,
            kt_bin: None,
            fraction: n / total as f64,
            mean_elevation: with_elevation.then(|| self.elev / n),
        })
    }
}

/// MBE, MAE and RMSE of `pred − target`.
pub fn metrics(pred: &[f32], target: &[f32]) -> Result<MetricsReport> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let mut acc = Accum::default();
    for (&p, &t) in pred.iter().zip(target) {
        acc.add(p, t, 0.0);
    }
    acc.report(pred.len(), false).ok_or_else(|| Error::Data("metrics over zero samples".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinningScheme {
    pub alpha_edges: Vec<f64>,
    pub kt_edges: Vec<f64>,
}

impl Default for BinningScheme {
    fn default() -> Self {
        BinningScheme { alpha_edges: vec![0.0, 0.3, 0.6, 1.0], kt_edges: vec![0.0, 0.4, 0.8, 1.2] }
    }
}

/// Bin of `v` under left-closed, right-open edges; the last bin also
/// accepts its upper edge when `close_last`. Edges are compared at the
/// samples' f32 precision so that a value stored as `1.2f32` hits `1.2`.
fn bin_of(edges: &[f64], v: f32, close_last: bool) -> Option<usize> {
    let e = |i: usize| edges[i] as f32;
    let last = edges.len() - 1;
    if close_last && v == e(last) {
        return Some(last - 1);
    }
    (0..last).find(|&i| v >= e(i) && v < e(i + 1))
}

fn bin_label(edges: &[f64], i: usize, close: bool) -> String {
    format!("[{}, {}{}", edges[i], edges[i + 1], if close { "]" } else { "[" })
}

impl BinningScheme {
    pub fn validate(&self) -> Result<()> {
        for e in [&self.alpha_edges, &self.kt_edges] {
            if e.len() < 2 || e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("bin edges must be strictly increasing with at least two entries".into()));
            }
        }
        Ok(())
    }

    /// Row labels (α bins then "all").
    pub fn alpha_labels(&self) -> Vec<String> {
        let n = self.alpha_edges.len() - 1;
        let mut v: Vec<String> = (0..n).map(|i| bin_label(&self.alpha_edges, i, false)).collect();
        v.push("all".into());
        v
    }

    pub fn kt_labels(&self) -> Vec<String> {
        let n = self.kt_edges.len() - 1;
        let mut v: Vec<String> = (0..n).map(|i| bin_label(&self.kt_edges, i, i + 1 == n)).collect();
        v.push("all".into());
        v
    }
}

/// Metrics per (α bin, k_T* bin) including the "all" margins.
/// `cells[a][k]` is `None` for an empty bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedReport {
    pub alpha_labels: Vec<String>,
    pub kt_labels: Vec<String>,
    pub cells: Vec<Vec<Option<MetricsReport>>>,
}

impl BinnedReport {
    pub fn all(&self) -> &MetricsReport {
        self.cells.last().and_then(|r| r.last()).and_then(|c| c.as_ref()).expect("all/all is never empty")
    }

    pub fn cell(&self, alpha: &str, kt: &str) -> Option<&MetricsReport> {
        let a = self.alpha_labels.iter().position(|l| l == alpha)?;
        let k = self.kt_labels.iter().position(|l| l == kt)?;
        self.cells[a][k].as_ref()
    }

    /// Rows: k_T* bins; columns: α bins; cells: RMSE (empty when no data).
    pub fn rmse_grid_csv(&self) -> String {
        let mut s = String::from("kt_bin");
        for a in &self.alpha_labels {
            write!(s, ",\"alpha {a}\"").unwrap();
        }
        s.push('\n');
        for (k, kl) in self.kt_labels.iter().enumerate() {
            write!(s, "\"{kl}\"").unwrap();
            for a in 0..self.alpha_labels.len() {
                match &self.cells[a][k] {
                    Some(m) => write!(s, ",{:.6}", m.rmse).unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Samples whose α or k_T* falls outside the edges count only towards the
/// "all" margins.
pub fn binned_metrics(
    pred: &[f32],
    target: &[f32],
    alpha: &[f32],
    kt: &[f32],
    elevation: Option<&[f32]>,
    scheme: &BinningScheme,
) -> Result<BinnedReport> {
    scheme.validate()?;
    let n = pred.len();
    if target.len() != n || alpha.len() != n || kt.len() != n || elevation.is_some_and(|e| e.len() != n) {
        return Err(Error::Shape("binned_metrics inputs differ in length".into()));
    }
    if n == 0 {
        return Err(Error::Data("metrics over zero samples".into()));
    }
    let (na, nk) = (scheme.alpha_edges.len() - 1, scheme.kt_edges.len() - 1);
    let mut acc = vec![vec![Accum::default(); nk + 1]; na + 1];
    for i in 0..n {
        let a = bin_of(&scheme.alpha_edges, alpha[i], false);
        let k = bin_of(&scheme.kt_edges, kt[i], true);
        let h = elevation.map_or(0.0, |e| e[i]);
        for ai in [a, Some(na)].into_iter().flatten() {
            for ki in [k, Some(nk)].into_iter().flatten() {
                acc[ai][ki].add(pred[i], target[i], h);
            }
        }
    }
    let (al, kl) = (scheme.alpha_labels(), scheme.kt_labels());
    let cells = acc
        .iter()
        .enumerate()
        .map(|(a, row)| {
            row.iter()
                .enumerate()
                .map(|(k, c)| {
                    c.report(n, elevation.is_some()).map(|mut m| {
                        m.alpha_bin = Some(al[a].clone());
                        m.kt_bin = Some(kl[k].clone());
                        m
                    })
                })
                .collect()
        })
        .collect();
    Ok(BinnedReport { alpha_labels: al, kt_labels: kl, cells })
}

/// Predictions and aligned diagnostics in physical units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSamples {
    pub pred: Vec<f32>,
    pub target: Vec<f32>,
    pub alpha: Vec<f32>,
    pub kt: Vec<f32>,
    pub elevation: Vec<f32>,
}

impl EvalSamples {
    pub fn binned(&self, scheme: &BinningScheme) -> Result<BinnedReport> {
        binned_metrics(&self.pred, &self.target, &self.alpha, &self.kt, Some(&self.elevation), scheme)
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        metrics(&self.pred, &self.target)
    }
}

/// Frames and pixels an evaluation covers. `pixels: None` means every pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub frames: Vec<usize>,
    pub pixels: Option<Vec<(usize, usize)>>,
}

impl EvalSet {
    /// Every `stride`-th frame of `frames`.
    pub fn strided(frames: &[usize], stride: usize) -> Self {
        EvalSet { frames: frames.iter().step_by(stride.max(1)).copied().collect(), pixels: None }
    }

    /// Fixed random pixel subset shared by every frame.
    pub fn with_random_pixels(mut self, ds: &Dataset, count: usize, seed: u64) -> Self {
        let mut all: Vec<(usize, usize)> = (0..ds.rows()).flat_map(|r| (0..ds.cols()).map(move |c| (r, c))).collect();
        all.shuffle(&mut substream(seed, "eval/pixels"));
        all.truncate(count.min(all.len()));
        all.sort();
        self.pixels = Some(all);
        self
    }

    fn indices(&self, cols: usize, hw: usize) -> Vec<usize> {
        match &self.pixels {
            Some(p) => p.iter().map(|&(r, c)| r * cols + c).collect(),
            None => (0..hw).collect(),
        }
    }
}

fn collect_targets(ds: &Dataset, set: &EvalSet) -> Result<EvalSamples> {
    let idx = set.indices(ds.cols(), ds.hw());
    let mut s = EvalSamples::default();
    let elev = ds.get("dem", 0)?;
    for &t in &set.frames {
        let (y, a, k) = (ds.get(TARGET, t)?, ds.get(ALBEDO, t)?, ds.get("kt", t)?);
        for &i in &idx {
            s.target.push(y[i]);
            s.alpha.push(a[i]);
            s.kt.push(k[i]);
            s.elevation.push(elev[i]);
        }
    }
    Ok(s)
}

/// Runs `model` over each frame of `set` and denormalises its output.
/// Transformers tile full frames; the baseline evaluates only the needed
/// pixels.
pub fn predict_frames(model: &Model, reader: &WindowReader, set: &EvalSet) -> Result<EvalSamples> {
    let ds = reader.dataset();
    let mut s = collect_targets(ds, set)?;
    let idx = set.indices(ds.cols(), ds.hw());
    let stat = reader.target_stat();
    match model {
        Model::Tsvit(m) => {
            if m.cfg.t != reader.spec().context || m.cfg.c != reader.spec().channels.len() {
                return Err(Error::Config("model and window spec disagree on context or channels".into()));
            }
            for &t in &set.frames {
                let x = reader.input(t, 0, 0, ds.rows(), ds.cols())?;
                let y = tile_apply(&x, m.cfg.h, m.cfg.w, 16, |xb| m.predict(xb))?;
                s.pred.extend(idx.iter().map(|&i| stat.denormalize(y.data()[i])));
            }
        }
        Model::Convresnet(m) => {
            let pixels: Vec<(usize, usize)> = idx.iter().map(|&i| (i / ds.cols(), i % ds.cols())).collect();
            for &t in &set.frames {
                let x = reader.input(t, 0, 0, ds.rows(), ds.cols())?;
                let chw = to_chw(&x)?;
                let y = m.infer_pixels(&chw, &pixels)?;
                s.pred.extend(y.into_iter().map(|v| stat.denormalize(v)));
            }
        }
    }
    Ok(s)
}

/// `[1, H, W, C]` single-step window to `[C, H, W]`.
fn to_chw(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s[0] != 1 {
        return Err(Error::Shape("the baseline consumes single-frame windows".into()));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut out = vec![0.0; c * h * w];
    for (i, v) in x.data().iter().enumerate() {
        let (p, ch) = (i / c, i % c);
        out[ch * h * w + p] = *v;
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// Per-pixel, per-calendar-month, per-hour-of-day mean target over a set of
/// frames, falling back to the per-pixel hour-of-day mean and then the
/// per-pixel mean where a slot has no data.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    hw: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

const CLIM_SLOTS: usize = 12 * 24;

impl Climatology {
    pub fn fit(ds: &Dataset, frames: &[usize]) -> Result<Self> {
        let hw = ds.hw();
        let mut sums = vec![0.0; CLIM_SLOTS * hw];
        let mut counts = vec![0u32; CLIM_SLOTS];
        for &t in frames {
            let slot = Self::slot(ds, t);
            counts[slot] += 1;
            for (s, &v) in sums[slot * hw..(slot + 1) * hw].iter_mut().zip(ds.get(TARGET, t)?.iter()) {
                *s += v as f64;
            }
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::Data("climatology needs at least one frame".into()));
        }
        Ok(Climatology { hw, sums, counts })
    }

    fn slot(ds: &Dataset, t: usize) -> usize {
        let ts = ds.timestamp(t);
        ts.month0() as usize * 24 + ts.hour() as usize
    }

    pub fn predict(&self, ds: &Dataset, t: usize) -> Vec<f32> {
        let slot = Self::slot(ds, t);
        let hour = slot % 24;
        let pick = |slots: &mut dyn Iterator<Item = usize>| -> Option<Vec<f32>> {
            let (mut acc, mut n) = (vec![0.0f64; self.hw], 0u64);
            for s in slots {
                if self.counts[s] > 0 {
                    n += self.counts[s] as u64;
                    for (a, v) in acc.iter_mut().zip(&self.sums[s * self.hw..(s + 1) * self.hw]) {
                        *a += v;
                    }
                }
            }
            (n > 0).then(|| acc.into_iter().map(|v| (v / n as f64) as f32).collect())
        };
        pick(&mut std::iter::once(slot))
            .or_else(|| pick(&mut (0..12).map(|m| m * 24 + hour)))
            .or_else(|| pick(&mut (0..CLIM_SLOTS)))
            .expect("fit guarantees data")
    }

    pub fn evaluate(&self, ds: &Dataset, set: &EvalSet) -> Result<EvalSamples> {
        let mut s = collect_targets(ds, set)?;
        let idx = set.indices(ds.cols(), ds.hw());
        for &t in &set.frames {
            let p = self.predict(ds, t);
            s.pred.extend(idx.iter().map(|&i| p[i]));
        }
        Ok(s)
    }
}


impl EvalSamples {
    /// Keeps pixel indices `keep` (into `0..hw`) of every frame; `self`
    /// must cover all pixels of each frame.
    pub fn restrict(&self, hw: usize, keep: &[usize]) -> Result<EvalSamples> {
        if hw == 0 || !self.pred.len().is_multiple_of(hw) || self.target.len() != self.pred.len() {
            return Err(Error::Shape("samples do not cover whole frames".into()));
        }
        let mut out = EvalSamples::default();
        for f in 0..self.pred.len() / hw {
            for &i in keep {
                let j = f * hw + i;
                out.pred.push(self.pred[j]);
                out.target.push(self.target[j]);
                out.alpha.push(self.alpha[j]);
                out.kt.push(self.kt[j]);
                out.elevation.push(self.elevation[j]);
            }
        }
        Ok(out)
    }
}

/// Experiment-level evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Every n-th test window is scored.
    pub frame_stride: usize,
    /// Size of the fixed pixel subset the baseline is scored on.
    pub baseline_pixels: usize,
    pub pixel_seed: u64,
    pub binning: BinningScheme,
    pub contexts: Vec<usize>,
    pub albedo_flags: Vec<bool>,
    pub seeds: Vec<u64>,
    /// Reference re-trainings that set the ablation noise band.
    pub reseeds: usize,
    pub perm_repeats: usize,
    pub perm_seed: u64,
    /// Every n-th test window enters permutation importance.
    pub perm_frame_stride: usize,
    /// Crop size for baseline permutation samples (transformers use their tile).
    pub perm_tile: usize,
    /// Concurrent trainings in sweeps and ablations.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            frame_stride: 20,
            baseline_pixels: 512,
            pixel_seed: 0,
            binning: BinningScheme::default(),
            contexts: vec![1, 4, 8, 16],
            albedo_flags: vec![false, true],
            seeds: vec![0],
            reseeds: 3,
            perm_repeats: 5,
            perm_seed: 0,
            perm_frame_stride: 40,
            perm_tile: 12,
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.binning.validate()?;
        if self.frame_stride == 0 || self.perm_frame_stride == 0 || self.jobs == 0 || self.perm_tile == 0 {
            return Err(Error::Config("strides, perm_tile and jobs must be positive".into()));
        }
        if self.contexts.is_empty() || self.contexts.contains(&0) || self.albedo_flags.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("contexts, albedo_flags and seeds must be non-empty; contexts positive".into()));
        }
        Ok(())
    }
}

/// A scene, its split and the model/training recipe shared by the
/// experiments. Model configs are templates: context and channel count are
/// filled in per run.
pub struct Experiment<'a> {
    pub ds: &'a Dataset,
    pub splits: Splits,
    pub model: ModelConfig,
    pub baseline: ConvResNetConfig,
    pub train: TrainConfig,
    pub baseline_train: TrainConfig,
    pub eval: EvalConfig,
}

/// One trained and scored model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// "tsvit", "convresnet" or "climatology".
    pub model: String,
    pub context: usize,
    pub albedo: bool,
    pub seed: u64,
    pub channels: Vec<String>,
    pub best_val_mse: Option<f64>,
    pub binned: BinnedReport,
    /// Metrics on the baseline's pixel subset, for like-for-like comparison.
    pub on_baseline_pixels: MetricsReport,
}

/// A trained model with its scores and training report.
pub struct Fitted {
    pub model: Model,
    pub report: TrainReport,
    pub result: RunResult,
}

impl<'a> Experiment<'a> {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.baseline_train.validate()?;
        self.eval.validate()
    }

    fn max_context(&self) -> usize {
        self.eval.contexts.iter().copied().max().unwrap_or(1)
    }

    /// Strided test windows valid for the longest context, so every run is
    /// scored on the same frames.
    pub fn eval_set(&self) -> EvalSet {
        let (ends, _) = window_ends(&self.splits, Split::Test, self.max_context());
        EvalSet::strided(&ends, self.eval.frame_stride)
    }

    pub fn baseline_pixel_indices(&self) -> Vec<usize> {
        let set = EvalSet { frames: vec![], pixels: None }.with_random_pixels(self.ds, self.eval.baseline_pixels, self.eval.pixel_seed);
        set.indices(self.ds.cols(), self.ds.hw())
    }

    /// Model config for `spec`, initialised from `seed` unless `init` is given.
    pub fn build(&self, kind: ModelKind, spec: &WindowSpec, seed: u64) -> Result<Model> {
        let cfg = match kind {
            ModelKind::Tsvit => self.model.with_context(spec.context).with_channels(spec.channels.len()),
            ModelKind::Convresnet => ModelConfig::Convresnet(self.baseline.clone()).with_channels(spec.channels.len()),
        };
        Model::new(&cfg, seed)
    }

    /// Trains `model` (already sized for `spec`) and scores it on the test set.
    pub fn fit(&self, mut model: Model, spec: &WindowSpec, seed: u64) -> Result<Fitted> {
        let kind = model.kind();
        let base = if kind == ModelKind::Tsvit { &self.train } else { &self.baseline_train };
        let cfg = TrainConfig { seed, ..base.clone() };
        let report = fit_model(&mut model, WindowReader::new(self.ds, spec)?, &self.splits, &cfg, |_, _| Ok(()))?;
        let albedo = spec.channels.iter().any(|c| c == ALBEDO);
        let result = self.score(&model, spec, seed, albedo, Some(report.best_val_mse))?;
        Ok(Fitted { model, report, result })
    }

    /// Test-set metrics of a trained model.
    pub fn score(&self, model: &Model, spec: &WindowSpec, seed: u64, albedo: bool, best_val_mse: Option<f64>) -> Result<RunResult> {
        let reader = WindowReader::new(self.ds, spec)?;
        let keep = self.baseline_pixel_indices();
        let set = self.eval_set();
        let (binned, subset) = match model {
            Model::Tsvit(_) => {
                let s = predict_frames(model, &reader, &set)?;
                (s.binned(&self.eval.binning)?, s.restrict(self.ds.hw(), &keep)?.metrics()?)
            }
            Model::Convresnet(_) => {
                let sub = EvalSet { frames: set.frames, pixels: Some(keep.iter().map(|&i| (i / self.ds.cols(), i % self.ds.cols())).collect()) };
                let s = predict_frames(model, &reader, &sub)?;
                (s.binned(&self.eval.binning)?, s.metrics()?)
            }
        };
        Ok(RunResult {
            model: model.kind().as_str().into(),
            context: spec.context,
            albedo,
            seed,
            channels: spec.channels.clone(),
            best_val_mse,
            binned,
            on_baseline_pixels: subset,
        })
    }

    /// The per-pixel month × hour mean of the training years, scored like a model.
    pub fn climatology(&self) -> Result<RunResult> {
        let train: Vec<usize> = self.splits.train.clone().collect();
        let clim = Climatology::fit(self.ds, &train)?;
        let s = clim.evaluate(self.ds, &self.eval_set())?;
        let keep = self.baseline_pixel_indices();
        Ok(RunResult {
            model: "climatology".into(),
            context: 0,
            albedo: false,
            seed: 0,
            channels: vec![],
            best_val_mse: None,
            binned: s.binned(&self.eval.binning)?,
            on_baseline_pixels: s.restrict(self.ds.hw(), &keep)?.metrics()?,
        })
    }
}

/// Results of training one transformer per (context, albedo flag, seed) plus
/// one baseline per albedo flag, all scored on the same test windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<RunResult>,
    pub baselines: Vec<RunResult>,
    pub climatology: RunResult,
    pub eval_frames: usize,
}

/// `(mean, sample sd)`; sd is 0 for a single value.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Long-format CSV header shared by the sweep and comparison reports.
pub const RESULT_CSV_HEADER: &str = "model,context,albedo,seed,alpha_bin,kt_bin,n,fraction,mean_elevation,mbe,mae,rmse";

fn result_rows(r: &RunResult, out: &mut String) {
    for row in &r.binned.cells {
        for m in row.iter().flatten() {
            writeln!(
                out,
                "{},{},{},{},\"{}\",\"{}\",{},{:.9},{},{:.6},{:.6},{:.6}",
                r.model,
                r.context,
                r.albedo,
                r.seed,
                m.alpha_bin.as_deref().unwrap_or(""),
                m.kt_bin.as_deref().unwrap_or(""),
                m.n,
                m.fraction,
                m.mean_elevation.map(|h| format!("{h:.3}")).unwrap_or_default(),
                m.mbe,
                m.mae,
                m.rmse
            )
            .unwrap();
        }
    }
}

/// CSV of every cell of every result, in [`RESULT_CSV_HEADER`] order.
pub fn results_csv<'r>(results: impl IntoIterator<Item = &'r RunResult>) -> String {
    let mut s = format!("{RESULT_CSV_HEADER}\n");
    for r in results {
        result_rows(r, &mut s);
    }
    s
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        results_csv(self.rows.iter().chain(&self.baselines).chain(std::iter::once(&self.climatology)))
    }

    /// RMSE of one cell across seeds for a (context, albedo) transformer.
    pub fn rmse_by_seed(&self, context: usize, albedo: bool, alpha: &str, kt: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.context == context && r.albedo == albedo)
            .filter_map(|r| r.binned.cell(alpha, kt).map(|m| m.rmse))
            .collect()
    }
}

enum SweepJob {
    Tsvit { context: usize, albedo: bool, seed: u64 },
    Baseline { albedo: bool, seed: u64 },
}

/// Trains and scores every sweep configuration; `eval.jobs` runs train
/// concurrently.
pub fn context_sweep(exp: &Experiment) -> Result<SweepTable> {
    exp.validate()?;
    let mut jobs = Vec::new();
    for &context in &exp.eval.contexts {
        for &albedo in &exp.eval.albedo_flags {
            for &seed in &exp.eval.seeds {
                jobs.push(SweepJob::Tsvit { context, albedo, seed });
            }
        }
    }
    for &albedo in &exp.eval.albedo_flags {
        jobs.push(SweepJob::Baseline { albedo, seed: exp.eval.seeds[0] });
    }
    let results = parallel::map_with(&jobs, exp.eval.jobs, |job| -> Result<RunResult> {
        let (kind, context, albedo, seed) = match *job {
            SweepJob::Tsvit { context, albedo, seed } => (ModelKind::Tsvit, context, albedo, seed),
            SweepJob::Baseline { albedo, seed } => (ModelKind::Convresnet, 1, albedo, seed),
        };
        let spec = WindowSpec::new(exp.ds, context, albedo);
        Ok(exp.fit(exp.build(kind, &spec, seed)?, &spec, seed)?.result)
    });
    let mut rows = Vec::new();
    let mut baselines = Vec::new();
    for r in results {
        let r = r?;
        if r.model == ModelKind::Tsvit.as_str() {
            rows.push(r);
        } else {
            baselines.push(r);
        }
    }
    Ok(SweepTable { rows, baselines, climatology: exp.climatology()?, eval_frames: exp.eval_set().frames.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Removed channel; `None` for the reference.
    pub feature: Option<String>,
    pub mae: f64,
    pub delta_mae: f64,
    /// ΔMAE per (α, k_T*) cell, aligned with the reference's labels.
    pub delta_cells: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub context: usize,
    pub seed: u64,
    pub alpha_labels: Vec<String>,
    pub kt_labels: Vec<String>,
    pub rows: Vec<AblationRow>,
    /// Test MAE of reference models re-trained from other seeds.
    pub reseed_mae: Vec<f64>,
    /// Largest |MAE_reseed − MAE_reference|.
    pub noise_band: f64,
}

impl AblationTable {
    pub fn row(&self, feature: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.feature.as_deref() == Some(feature))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,alpha_bin,kt_bin,delta_mae\n");
        for r in &self.rows {
            let name = r.feature.as_deref().unwrap_or("reference");
            for (a, al) in self.alpha_labels.iter().enumerate() {
                for (k, kl) in self.kt_labels.iter().enumerate() {
                    if let Some(d) = r.delta_cells[a][k] {
                        writeln!(s, "{name},\"{al}\",\"{kl}\",{d:.6}").unwrap();
                    }
                }
            }
        }
        s
    }
}

fn delta_cells(a: &BinnedReport, reference: &BinnedReport) -> Vec<Vec<Option<f64>>> {
    a.cells
        .iter()
        .zip(&reference.cells)
        .map(|(ra, rr)| ra.iter().zip(rr).map(|(x, y)| Some(x.as_ref()?.mae - y.as_ref()?.mae)).collect())
        .collect()
}

/// Removes each feature in turn and re-trains. Every ablated model starts
/// from the reference initialisation with that channel's input weights
/// dropped and sees the same batches, so a channel that carries nothing
/// yields the reference trajectory. The noise band comes from
/// `eval.reseeds` reference trainings with other seeds.
pub fn feature_ablation(exp: &Experiment, spec: &WindowSpec, features: &[String], seed: u64) -> Result<AblationTable> {
    exp.validate()?;
    if spec.channels.len() < 2 {
        return Err(Error::Config("ablation needs at least two input channels".into()));
    }
    let positions = features
        .iter()
        .map(|f| spec.channels.iter().position(|c| c == f).ok_or_else(|| Error::Config(format!("feature {f} is not an input channel"))))
        .collect::<Result<Vec<_>>>()?;
    let init = exp.build(ModelKind::Tsvit, spec, seed)?;
    let mut jobs: Vec<(Option<usize>, u64)> = vec![(None, seed)];
    jobs.extend(positions.iter().map(|&p| (Some(p), seed)));
    jobs.extend((1..=exp.eval.reseeds as u64).map(|k| (None, seed + k)));
    let results = parallel::map_with(&jobs, exp.eval.jobs, |&(drop, s)| -> Result<RunResult> {
        let (model, spec) = match drop {
            Some(p) => (init.drop_input_channel(p)?, spec.without(&spec.channels[p])),
            None if s == seed => (init.clone(), spec.clone()),
            None => (exp.build(ModelKind::Tsvit, spec, s)?, spec.clone()),
        };
        Ok(exp.fit(model, &spec, s)?.result)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let reference = &results[0];
    let ref_mae = reference.binned.all().mae;
    let rows = results[..=features.len()]
        .iter()
        .enumerate()
        .map(|(i, r)| AblationRow {
            feature: (i > 0).then(|| features[i - 1].clone()),
            mae: r.binned.all().mae,
            delta_mae: r.binned.all().mae - ref_mae,
            delta_cells: delta_cells(&r.binned, &reference.binned),
        })
        .collect();
    let reseed_mae: Vec<f64> = results[features.len() + 1..].iter().map(|r| r.binned.all().mae).collect();
    let noise_band = reseed_mae.iter().map(|m| (m - ref_mae).abs()).fold(0.0, f64::max);
    Ok(AblationTable {
        context: spec.context,
        seed,
        alpha_labels: reference.binned.alpha_labels.clone(),
        kt_labels: reference.binned.kt_labels.clone(),
        rows,
        reseed_mae,
        noise_band,
    })
}

/// Crops a permutation-importance run scores: every tile origin of every
/// listed window end.
pub struct PermutationSamples<'r> {
    reader: &'r WindowReader<'r>,
    crops: Vec<(usize, usize, usize)>,
    tile: (usize, usize),
}

impl<'r> PermutationSamples<'r> {
    pub fn new(reader: &'r WindowReader<'r>, ends: &[usize], tile: (usize, usize)) -> Result<Self> {
        let ds = reader.dataset();
        if tile.0 == 0 || tile.1 == 0 || tile.0 > ds.rows() || tile.1 > ds.cols() {
            return Err(Error::Config(format!("tile {tile:?} does not fit the {}x{} grid", ds.rows(), ds.cols())));
        }
        let (rs, cs) = (tile_origins(ds.rows(), tile.0), tile_origins(ds.cols(), tile.1));
        let mut crops = Vec::with_capacity(ends.len() * rs.len() * cs.len());
        for &e in ends {
            for &r in &rs {
                crops.extend(cs.iter().map(|&c| (e, r, c)));
            }
        }
        if crops.is_empty() {
            return Err(Error::Data("no samples for permutation importance".into()));
        }
        Ok(PermutationSamples { reader, crops, tile })
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// MAE (W/m²) with channel `feature` of sample `i` taken from sample
    /// `perm[i]`; no permutation when `perm` is `None`.
    pub fn mae(&self, model: &Model, feature: usize, perm: Option<&[usize]>) -> Result<f64> {
        let stat = self.reader.target_stat();
        let c = self.reader.spec().channels.len();
        let (h, w) = self.tile;
        let idx: Vec<usize> = (0..self.crops.len()).collect();
        let chunks: Vec<&[usize]> = idx.chunks(16).collect();
        let parts = parallel::map(&chunks, |chunk| -> Result<(f64, usize)> {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for &i in chunk.iter() {
                let (e, r, col) = self.crops[i];
                let mut x = self.reader.input(e, r, col, h, w)?.into_data();
                if let Some(p) = perm {
                    let (e2, r2, c2) = self.crops[p[i]];
                    let donor = self.reader.input(e2, r2, c2, h, w)?;
                    for (k, v) in donor.data().iter().enumerate().filter(|(k, _)| k % c == feature) {
                        x[k] = *v;
                    }
                }
                xs.extend(x);
                ys.extend(self.reader.target(e, r, col, h, w)?.into_data());
            }
            let t = self.reader.spec().context;
            let pred = model.predict_tiles(&Tensor::new(&[chunk.len(), t, h, w, c], xs)?)?;
            let abs: f64 = pred.data().iter().zip(&ys).map(|(&p, &y)| (stat.denormalize(p) as f64 - stat.denormalize(y) as f64).abs()).sum();
            Ok((abs, ys.len()))
        });
        let (mut sum, mut n) = (0.0, 0);
        for p in parts {
            let (s, k) = p?;
            sum += s;
            n += k;
        }
        Ok(sum / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature: String,
    pub mean_delta_mae: f64,
    pub sd_delta_mae: f64,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub baseline_mae: f64,
    pub samples: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceTable {
    pub fn row(&self, feature: &str) -> Option<&ImportanceRow> {
        self.rows.iter().find(|r| r.feature == feature)
    }

    /// Feature with the largest mean ΔMAE.
    pub fn top(&self) -> Option<&ImportanceRow> {
        self.rows.iter().max_by(|a, b| a.mean_delta_mae.total_cmp(&b.mean_delta_mae))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,mean_delta_mae,sd_delta_mae,repeats\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6},{}", r.feature, r.mean_delta_mae, r.sd_delta_mae, r.deltas.len()).unwrap();
        }
        s
    }
}

/// Shuffles each feature across whole sample crops (every time step of a
/// crop moves together) and reports the MAE increase, over `n_repeats`
/// seeded permutations per feature.
pub fn permutation_importance(
    model: &Model,
    samples: &PermutationSamples,
    features: &[String],
    n_repeats: usize,
    seed: u64,
) -> Result<ImportanceTable> {
    if n_repeats == 0 {
        return Err(Error::Config("n_repeats must be positive".into()));
    }
    let channels = &samples.reader.spec().channels;
    let baseline = samples.mae(model, 0, None)?;
    let mut rows = Vec::new();
    for f in features {
        let ch = channels.iter().position(|c| c == f).ok_or_else(|| Error::Config(format!("feature {f} is not an input channel")))?;
        let mut rng = substream(seed, &format!("perm/{f}"));
        let mut deltas = Vec::with_capacity(n_repeats);
        for _ in 0..n_repeats {
            let mut perm: Vec<usize> = (0..samples.len()).collect();
            perm.shuffle(&mut rng);
            deltas.push(samples.mae(model, ch, Some(&perm))? - baseline);
        }
        let (mean, sd) = mean_sd(&deltas);
        rows.push(ImportanceRow { feature: f.clone(), mean_delta_mae: mean, sd_delta_mae: sd, deltas });
    }
    Ok(ImportanceTable { baseline_mae: baseline, samples: samples.len(), n_repeats, seed, rows })
}
