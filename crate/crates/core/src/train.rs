//! Optimizers, learning-rate schedules and the supervised training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::experiments::data::Dataset;
use crate::nn::layers::{Model, Phase};
use crate::nn::params::{ParamGroup, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// Linear warm-up, then half-cosine decay to zero.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Random horizontal flips of training images.
    #[serde(default)]
    pub augment_flip: bool,
    /// Random translations of up to this many pixels with zero fill.
    #[serde(default)]
    pub augment_crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr_init: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 1,
            schedule: Schedule::Cosine,
            seed: 0,
            augment_flip: false,
            augment_crop: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::Config(format!("train.lr_init must be positive, got {}", self.lr_init)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
}

impl LrSchedule {
    /// Learning rate of 0-based step `step`: `lr·(step+1)/warmup` while warming
    /// up, then `lr·½(1 + cos(π·progress))` over the remaining steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr_init,
            Schedule::Cosine => {
                if step < self.warmup_steps {
                    return self.lr_init * (step + 1) as f64 / self.warmup_steps as f64;
                }
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                cosine_lr(self.lr_init, progress)
            }
        }
    }
}

/// Half-cosine decay at `progress ∈ [0, 1]`.
pub fn cosine_lr(lr_init: f64, progress: f64) -> f64 {
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Updates every parameter of `group` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>, group: ParamGroup, lr: f64) {
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for (&id, g) in grads {
            let p = store.param(id);
            if p.group != group {
                continue;
            }
            let wd = if p.no_decay { T::zero() } else { T::of(self.weight_decay) };
            let mut d = g.clone();
            for (dv, &w) in d.data_mut().iter_mut().zip(p.value.data()) {
                *dv += wd * w;
            }
            let buf = match self.velocity.get_mut(&id) {
                Some(v) => {
                    for (vv, &dv) in v.data_mut().iter_mut().zip(d.data()) {
                        *vv = mu * *vv + dv;
                    }
                    v
                }
                None => self.velocity.entry(id).or_insert(d),
            };
            let w = store.get_mut(id);
            for (wv, &bv) in w.data_mut().iter_mut().zip(buf.data()) {
                *wv -= lr * bv;
            }
        }
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self { lr, betas, eps: 1e-8, weight_decay, state: BTreeMap::new(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>, group: ParamGroup) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (&id, g) in grads {
            if store.param(id).group != group {
                continue;
            }
            let dims = g.dims().to_vec();
            let (m, v) = self.state.entry(id).or_insert_with(|| (Tensor::zeros(&dims), Tensor::zeros(&dims)));
            let w = store.get_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i].f64() + self.weight_decay * w.data()[i].f64();
                let mi = b1 * m.data()[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].f64() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = T::of(mi);
                v.data_mut()[i] = T::of(vi);
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                w.data_mut()[i] -= T::of(update);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_err: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// CSV with columns `epoch,train_loss,test_err,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,test_err,lr\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.test_err, r.lr);
        }
        s
    }

    pub fn final_test_err(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.test_err)
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown train.schedule `{other}`"))),
        }
    }
}

/// Flips and shifts every `(C, H, W)` image of a batch in place.
fn augment<T: Scalar>(batch: &mut Tensor<T>, flip: bool, crop: usize, rng: &mut impl Rng) -> Result<()> {
    let (_, c, h, w) = batch.nchw()?;
    let plane = h * w;
    let mut scratch = vec![T::zero(); plane];
    for img in batch.data_mut().chunks_exact_mut(c * plane) {
        let mirror = flip && rng.gen_bool(0.5);
        let (dy, dx) = if crop > 0 {
            let r = crop as isize;
            (rng.gen_range(-r..=r), rng.gen_range(-r..=r))
        } else {
            (0, 0)
        };
        if !mirror && dy == 0 && dx == 0 {
            continue;
        }
        for p in img.chunks_exact_mut(plane) {
            for y in 0..h {
                for x in 0..w {
                    let sx = if mirror { w - 1 - x } else { x } as isize - dx;
                    let sy = y as isize - dy;
                    let inside = (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx);
                    scratch[y * w + x] = if inside { p[sy as usize * w + sx as usize] } else { T::zero() };
                }
            }
            p.copy_from_slice(&scratch);
        }
    }
    Ok(())
}

/// Mean cross-entropy and prediction of a model on a batch.
pub fn batch_loss<T: Scalar, M: Model<T>>(model: &M, images: Tensor<T>, labels: &[usize], phase: Phase) -> Result<(Tape<T>, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let x = tape.input(images);
    let logits = model.forward(&mut tape, x, phase)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((tape, loss))
}

/// Predicted class of every sample.
pub fn predict<T: Scalar, M: Model<T>>(model: &M, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let x = tape.input(data.batch_images::<T>(chunk)?);
        let logits = model.forward(&mut tape, x, Phase::Eval)?;
        let v = tape.value(logits);
        let c = v.dims()[1];
        for row in v.data().chunks_exact(c) {
            let mut best = 0;
            for (j, &val) in row.iter().enumerate() {
                if !val.is_finite() {
                    return Err(Error::Numerical("non-finite logits during evaluation".into()));
                }
                if val > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Classification error in `[0, 1]`.
pub fn error_rate<T: Scalar, M: Model<T>>(model: &M, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, data, batch_size)?;
    let wrong = pred.iter().zip(data.labels()).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / data.len() as f64)
}

/// Trains with SGD + momentum under `cfg`. The test error column comes from
/// `test` when given, otherwise from the training set.
pub fn train<T: Scalar, M: Model<T>>(model: &mut M, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        lr_init: cfg.lr_init,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
        schedule: cfg.schedule,
    };
    let mut sgd = Sgd::<T>::new(cfg.momentum, cfg.weight_decay);
    let mut step = 0usize;
    let shuffle_stream = rng::stream_id("train.shuffle");
    let augment_stream = rng::stream_id("train.augment");

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, shuffle_stream, epoch as u64));
        let epoch_lr = schedule.lr_at(step);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            model.begin_iteration(step as u64);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let mut images = data.batch_images::<T>(chunk)?;
            if cfg.augment_flip || cfg.augment_crop > 0 {
                augment(&mut images, cfg.augment_flip, cfg.augment_crop, &mut rng::stream(cfg.seed, augment_stream, step as u64))?;
            }
            let (tape, loss) = batch_loss(model, images, &labels, Phase::Train)?;
            let l = tape.value(loss).data()[0].f64();
            if !l.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}, batch {b}")));
            }
            loss_sum += l * chunk.len() as f64;
            let grads = tape.backward(loss)?.param_grads();
            sgd.step(model.store_mut(), &grads, ParamGroup::Weight, schedule.lr_at(step));
            step += 1;
        }
        let test_err = error_rate(model, test.unwrap_or(data), cfg.batch_size.max(64))?;
        report.epochs.push(EpochRecord { epoch, train_loss: loss_sum / data.len() as f64, test_err, lr: epoch_lr });
    }
    Ok(report)
}
