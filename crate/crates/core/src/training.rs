//! MSE training with AdamW, reduce-on-plateau and best-checkpoint selection.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use hemulab_tensor::rng::{substream, Rng};
use hemulab_tensor::{Bound, ParamSet, Result as TResult, Scalar, Tape, Tensor, TensorError, Var};

use crate::conv::ConvResNet;
use crate::dataset::{window_ends, Split, Splits, WindowReader};
use crate::model::{Model, ModelConfig};
use crate::tsvit::Tsvit;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_factor: f64,
    /// Validations without improvement tolerated before a reduction.
    pub plateau_patience: usize,
    pub plateau_cooldown: usize,
    /// Relative improvement that counts as progress.
    pub plateau_threshold: f64,
    pub epochs: usize,
    /// Steps per epoch; defaults to one pass over the training windows.
    pub steps_per_epoch: Option<usize>,
    /// Validation period as a fraction of an epoch.
    pub val_every: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of fixed validation samples.
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 2,
            plateau_cooldown: 1,
            plateau_threshold: 1e-4,
            epochs: 10,
            steps_per_epoch: None,
            val_every: 0.5,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            val_samples: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.val_samples == 0 {
            return bad("lr, epochs, batch_size and val_samples must be positive");
        }
        if !(self.val_every > 0.0 && self.val_every <= 1.0) {
            return bad("val_every must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("invalid AdamW hyperparameters");
        }
        Ok(())
    }

    /// Steps between validations; the epoch must split evenly.
    pub fn val_interval(&self, steps_per_epoch: usize) -> Result<usize> {
        let exact = steps_per_epoch as f64 * self.val_every;
        let k = exact.round();
        if k < 1.0 || (exact - k).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "val_every {} does not divide an epoch of {steps_per_epoch} steps",
                self.val_every
            )));
        }
        Ok(k as usize)
    }
}

/// Mean squared error with a shape check.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> TResult<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(TensorError::ShapeMismatch { op: "mse_loss", lhs: tape.shape(pred).to_vec(), rhs: tape.shape(target).to_vec() });
    }
    tape.mse(pred, target)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamW { beta1, beta2, eps, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_config(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// Applies one update from the gradients stored on `params`. Refuses
    /// (leaving everything untouched) if any gradient is missing or
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Config("optimizer state does not match the parameter set".into()));
        }
        for (_, name, t) in params.iter() {
            match &t.grad {
                None => return Err(Error::Data(format!("parameter {name} has no gradient"))),
                Some(g) if g.iter().any(|x| !x.is_finite()) => {
                    return Err(Error::Diverged { step: self.step as usize + 1, reason: format!("non-finite gradient in {name}") })
                }
                _ => {}
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = t.grad.take().expect("checked above");
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                let theta = *x as f64;
                *x = (theta - lr * mh / (vh.sqrt() + self.eps) - lr * self.weight_decay * theta) as f32;
            }
            t.grad = Some(g);
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule driven by validation losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub cooldown: usize,
    pub threshold: f64,
    pub best: f64,
    pub bad: usize,
    pub cooldown_left: usize,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Plateau {
            lr: cfg.lr,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            cooldown: cfg.plateau_cooldown,
            threshold: cfg.plateau_threshold,
            best: f64::INFINITY,
            bad: 0,
            cooldown_left: 0,
        }
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad = 0;
        } else if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        if self.bad > self.patience {
            self.lr *= self.factor;
            self.bad = 0;
            self.cooldown_left = self.cooldown;
        }
        self.lr
    }
}

/// Anything trainable by regression on `(x, y)` batches.
pub trait Regressor {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> TResult<Var>;
}

impl Regressor for Tsvit {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> TResult<Var> {
        Tsvit::forward(self, tape, p, x)
    }
}

impl Regressor for ConvResNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> TResult<Var> {
        ConvResNet::forward(self, tape, p, x)
    }
}

impl Regressor for Model {
    fn params(&self) -> &ParamSet {
        Model::params(self)
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        Model::params_mut(self)
    }
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> TResult<Var> {
        match self {
            Model::Tsvit(m) => m.forward(tape, p, x),
            Model::Convresnet(m) => m.forward(tape, p, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

/// Supplier of shuffled training batches and a fixed validation set.
pub trait BatchSource {
    /// Samples in one pass over the training data.
    fn train_len(&self) -> usize;
    fn train_batch(&self, rng: &mut Rng, size: usize) -> Result<Batch>;
    fn val_batches(&self) -> &[Batch];
}

/// Forward and MSE for one batch; returns the loss and the bound tape state.
fn batch_loss<M: Regressor>(model: &M, batch: &Batch) -> Result<(f64, Tape<f32>, Bound, Var)> {
    let mut tape = Tape::<f32>::new();
    let p = model.params().bind(&mut tape);
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let pred = model.forward(&mut tape, &p, x)?;
    let loss = mse_loss(&mut tape, pred, y)?;
    Ok((tape.value(loss).item() as f64, tape, p, loss))
}

/// Sample-weighted MSE over a set of batches; never touches parameters.
pub fn evaluate_mse<M: Regressor>(model: &M, batches: &[Batch]) -> Result<f64> {
    let (mut sse, mut n) = (0.0, 0usize);
    for b in batches {
        let (loss, ..) = batch_loss(model, b)?;
        sse += loss * b.y.numel() as f64;
        n += b.y.numel();
    }
    if n == 0 {
        return Err(Error::Data("validation set is empty".into()));
    }
    Ok(sse / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: f64,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since training started; excluded from determinism checks.
    pub wall_time: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_val_mse: f64,
    pub best_step: usize,
    pub steps: usize,
    pub final_lr: f64,
    pub log: Vec<LogRecord>,
}

/// Trains in place and leaves the best-validation parameters in `model`.
/// `on_best` fires whenever validation improves (e.g. to save a checkpoint).
pub fn train<M: Regressor>(
    model: &mut M,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
    mut on_best: impl FnMut(&M, &LogRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let spe = cfg.steps_per_epoch.unwrap_or_else(|| data.train_len().div_ceil(cfg.batch_size)).max(1);
    let interval = cfg.val_interval(spe)?;
    let total = spe * cfg.epochs;
    let mut rng = substream(cfg.seed, "train/batches");
    let mut opt = AdamW::from_config(model.params(), cfg);
    let mut sched = Plateau::new(cfg);
    let mut lr = cfg.lr;
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut log = Vec::new();
    let started = Instant::now();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 1..=total {
        let batch = data.train_batch(&mut rng, cfg.batch_size)?;
        let (loss, tape, p, lv) = batch_loss(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, reason: format!("training loss {loss}") });
        }
        let grads = tape.backward(lv)?;
        model.params_mut().set_grads(&p, &grads).map_err(|e| Error::Diverged { step, reason: e.to_string() })?;
        opt.step(model.params_mut(), lr)?;
        acc += loss;
        acc_n += 1;
        if step % interval == 0 || step == total {
            let epoch = step as f64 / spe as f64;
            let wall = started.elapsed().as_secs_f64();
            log.push(LogRecord { step, epoch, split: "train".into(), loss: acc / acc_n as f64, lr, wall_time: wall, seed: cfg.seed });
            (acc, acc_n) = (0.0, 0);
            let val = evaluate_mse(model, data.val_batches())?;
            let rec = LogRecord { step, epoch, split: "val".into(), loss: val, lr, wall_time: wall, seed: cfg.seed };
            log.push(rec.clone());
            if !val.is_finite() {
                return Err(Error::Diverged { step, reason: format!("validation loss {val}") });
            }
            if best.as_ref().is_none_or(|(b, ..)| val < *b) {
                let mut snapshot = model.params().clone();
                snapshot.zero_grads();
                best = Some((val, step, snapshot));
                model.params_mut().zero_grads();
                on_best(model, &rec)?;
            }
            lr = sched.observe(val);
        }
    }
    let (best_val_mse, best_step, params) = best.expect("at least one validation");
    *model.params_mut() = params;
    Ok(TrainReport { best_val_mse, best_step, steps: total, final_lr: lr, log })
}

/// Random crops of temporal windows for the transformer.
pub struct TileSource<'a> {
    reader: WindowReader<'a>,
    ends: Vec<usize>,
    tile: (usize, usize),
    val: Vec<Batch>,
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(&shape, data)?)
}

impl<'a> TileSource<'a> {
    pub fn new(reader: WindowReader<'a>, splits: &Splits, tile: (usize, usize), cfg: &TrainConfig) -> Result<Self> {
        let ds = reader.dataset();
        if tile.0 > ds.rows() || tile.1 > ds.cols() {
            return Err(Error::Config(format!("tile {tile:?} exceeds the {}x{} grid", ds.rows(), ds.cols())));
        }
        let t = reader.spec().context;
        let (ends, _) = window_ends(splits, Split::Train, t);
        let (val_ends, _) = window_ends(splits, Split::Val, t);
        if ends.is_empty() || val_ends.is_empty() {
            return Err(Error::Data(format!("no train or validation windows for context {t}")));
        }
        let mut src = TileSource { reader, ends, tile, val: Vec::new() };
        let mut rng = substream(cfg.seed, "train/val-crops");
        let picks: Vec<(usize, usize, usize)> = (0..cfg.val_samples).map(|_| src.pick(&mut rng, &val_ends)).collect();
        for chunk in picks.chunks(cfg.batch_size) {
            src.val.push(src.assemble(chunk)?);
        }
        Ok(src)
    }

    fn pick(&self, rng: &mut Rng, ends: &[usize]) -> (usize, usize, usize) {
        let ds = self.reader.dataset();
        let e = ends[rng.gen_range(0..ends.len())];
        let r0 = rng.gen_range(0..=ds.rows() - self.tile.0);
        let c0 = rng.gen_range(0..=ds.cols() - self.tile.1);
        (e, r0, c0)
    }

    fn assemble(&self, picks: &[(usize, usize, usize)]) -> Result<Batch> {
        let (th, tw) = self.tile;
        let mut xs = Vec::with_capacity(picks.len());
        let mut ys = Vec::with_capacity(picks.len());
        for &(e, r0, c0) in picks {
            xs.push(self.reader.input(e, r0, c0, th, tw)?);
            ys.push(self.reader.target(e, r0, c0, th, tw)?);
        }
        Ok(Batch { x: stack(&xs)?, y: stack(&ys)? })
    }
}

impl BatchSource for TileSource<'_> {
    fn train_len(&self) -> usize {
        self.ends.len()
    }

    fn train_batch(&self, rng: &mut Rng, size: usize) -> Result<Batch> {
        let picks: Vec<_> = (0..size).map(|_| self.pick(rng, &self.ends)).collect();
        self.assemble(&picks)
    }

    fn val_batches(&self) -> &[Batch] {
        &self.val
    }
}

/// Reflect-padded single-frame patches centred on random pixels, for the
/// convolutional baseline.
pub struct PixelSource<'a> {
    reader: WindowReader<'a>,
    frames: Vec<usize>,
    patch: usize,
    val: Vec<Batch>,
}

impl<'a> PixelSource<'a> {
    pub fn new(reader: WindowReader<'a>, splits: &Splits, patch: usize, cfg: &TrainConfig) -> Result<Self> {
        let frames: Vec<usize> = splits.train.clone().collect();
        let val_frames: Vec<usize> = splits.val.clone().collect();
        if frames.is_empty() || val_frames.is_empty() {
            return Err(Error::Data("no train or validation frames".into()));
        }
        let mut src = PixelSource { reader, frames, patch, val: Vec::new() };
        let mut rng = substream(cfg.seed, "train/val-pixels");
        let picks: Vec<(usize, usize, usize)> = (0..cfg.val_samples).map(|_| src.pick(&mut rng, &val_frames)).collect();
        for chunk in picks.chunks(cfg.batch_size) {
            src.val.push(src.assemble(chunk)?);
        }
        Ok(src)
    }

    fn pick(&self, rng: &mut Rng, frames: &[usize]) -> (usize, usize, usize) {
        let ds = self.reader.dataset();
        (frames[rng.gen_range(0..frames.len())], rng.gen_range(0..ds.rows()), rng.gen_range(0..ds.cols()))
    }

    fn assemble(&self, picks: &[(usize, usize, usize)]) -> Result<Batch> {
        let c = self.reader.spec().channels.len();
        let mut x = Vec::with_capacity(picks.len() * c * self.patch * self.patch);
        let mut y = Vec::with_capacity(picks.len());
        for &(t, r, col) in picks {
            self.reader.patch(t, r, col, self.patch, &mut x)?;
            y.push(self.reader.target(t, r, col, 1, 1)?.data()[0]);
        }
        Ok(Batch {
            x: Tensor::new(&[picks.len(), c, self.patch, self.patch], x)?,
            y: Tensor::new(&[picks.len()], y)?,
        })
    }
}

impl BatchSource for PixelSource<'_> {
    fn train_len(&self) -> usize {
        self.frames.len() * self.reader.dataset().hw()
    }

    fn train_batch(&self, rng: &mut Rng, size: usize) -> Result<Batch> {
        let picks: Vec<_> = (0..size).map(|_| self.pick(rng, &self.frames)).collect();
        self.assemble(&picks)
    }

    fn val_batches(&self) -> &[Batch] {
        &self.val
    }
}

/// Trains `model` on the windows `reader` describes: random tiles of the
/// model's size for the transformer, single pixels for the baseline.
pub fn fit_model(
    model: &mut Model,
    reader: WindowReader<'_>,
    splits: &Splits,
    cfg: &TrainConfig,
    on_best: impl FnMut(&Model, &LogRecord) -> Result<()>,
) -> Result<TrainReport> {
    let spec = reader.spec();
    let mc = model.config();
    if mc.context() != spec.context || mc.channels() != spec.channels.len() {
        return Err(Error::Config(format!(
            "model expects T={} C={}, windows provide T={} C={}",
            mc.context(),
            mc.channels(),
            spec.context,
            spec.channels.len()
        )));
    }
    match mc {
        ModelConfig::Tsvit(c) => {
            let src = TileSource::new(reader, splits, (c.h, c.w), cfg)?;
            train(model, &src, cfg, on_best)
        }
        ModelConfig::Convresnet(c) => {
            let src = PixelSource::new(reader, splits, c.patch_size, cfg)?;
            train(model, &src, cfg, on_best)
        }
    }
}

/// MSE of `model` on the fixed validation set `fit_model` would build for
/// the same reader, splits and config.
pub fn validation_mse(model: &Model, reader: WindowReader<'_>, splits: &Splits, cfg: &TrainConfig) -> Result<f64> {
    match model.config() {
        ModelConfig::Tsvit(c) => evaluate_mse(model, TileSource::new(reader, splits, (c.h, c.w), cfg)?.val_batches()),
        ModelConfig::Convresnet(c) => evaluate_mse(model, PixelSource::new(reader, splits, c.patch_size, cfg)?.val_batches()),
    }
}
