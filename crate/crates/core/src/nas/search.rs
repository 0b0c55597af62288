//! First-order alternating search of weights and alphas.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::data::Dataset;
use crate::nas::genotype::{CellGenotype, CellType};
use crate::nas::supernet::{Supernet, SupernetConfig};
use crate::nn::layers::Phase;
use crate::nn::params::ParamGroup;
use crate::rng;
use crate::tensor::Scalar;
use crate::train::{batch_loss, Adam, LrSchedule, Schedule, Sgd};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub net: SupernetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_weight_decay: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            net: SupernetConfig::default(),
            epochs: 20,
            batch_size: 16,
            lr_init: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            alpha_lr: 6e-4,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("search.batch_size must be positive".into()));
        }
        if !(self.lr_init >= 0.0) || !(self.alpha_lr >= 0.0) {
            return Err(Error::Config("search learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("search.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Alphas of one cell type after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSnapshot {
    pub cell_type: CellType,
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean loss of the validation batches seen by the alpha steps.
    pub val_loss: f64,
    pub lr: f64,
    pub alphas: Vec<AlphaSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SearchReport {
    pub epochs: Vec<SearchEpoch>,
}

impl SearchReport {
    /// `epoch,train_loss,val_loss,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
        }
        s
    }

    /// `1 − last / first` validation loss.
    pub fn val_loss_drop(&self) -> Option<f64> {
        let first = self.epochs.first()?.val_loss;
        let last = self.epochs.last()?.val_loss;
        Some(1.0 - last / first)
    }
}

pub struct SearchOutcome<T> {
    pub genotypes: Vec<CellGenotype>,
    pub report: SearchReport,
    pub supernet: Supernet<T>,
}

fn check_finite(loss: f64, phase: &str, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {phase} loss at epoch {epoch}, step {step}")))
    }
}

/// Alternates one SGD step on a `train` batch with one Adam step of the alphas
/// on a `val` batch, then discretizes every cell type.
pub fn search<T: Scalar>(train: &Dataset, val: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("search needs non-empty train and validation splits".into()));
    }
    let (c, _, _) = train.image_dims();
    let net_cfg = SupernetConfig { in_channels: c, num_classes: train.num_classes(), ..cfg.net.clone() };
    let mut net = Supernet::<T>::new(net_cfg, cfg.seed)?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size).min(val.len().div_ceil(cfg.batch_size));
    let schedule =
        LrSchedule { lr_init: cfg.lr_init, warmup_steps: 0, total_steps: cfg.epochs * steps_per_epoch, schedule: Schedule::Cosine };
    let mut sgd = Sgd::<T>::new(cfg.momentum, cfg.weight_decay);
    let mut adam = Adam::<T>::new(cfg.alpha_lr, cfg.alpha_betas, cfg.alpha_weight_decay);
    let (train_stream, val_stream) = (rng::stream_id("search.train"), rng::stream_id("search.val"));
    let mut report = SearchReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut t_order: Vec<usize> = (0..train.len()).collect();
        t_order.shuffle(&mut rng::stream(cfg.seed, train_stream, epoch as u64));
        let mut v_order: Vec<usize> = (0..val.len()).collect();
        v_order.shuffle(&mut rng::stream(cfg.seed, val_stream, epoch as u64));
        let lr = schedule.lr_at(step);
        let (mut t_sum, mut t_n, mut v_sum, mut v_n) = (0.0, 0usize, 0.0, 0usize);
        for (s, (tb, vb)) in t_order.chunks(cfg.batch_size).zip(v_order.chunks(cfg.batch_size)).enumerate() {
            let labels: Vec<usize> = tb.iter().map(|&i| train.labels()[i]).collect();
            let (tape, loss) = batch_loss(&net, train.batch_images::<T>(tb)?, &labels, Phase::Train)?;
            let l = tape.value(loss).data()[0].f64();
            check_finite(l, "weight", epoch, s)?;
            t_sum += l * tb.len() as f64;
            t_n += tb.len();
            let grads = tape.backward(loss)?.param_grads();
            sgd.step(&mut net.store, &grads, ParamGroup::Weight, schedule.lr_at(step));

            let labels: Vec<usize> = vb.iter().map(|&i| val.labels()[i]).collect();
            let (tape, loss) = batch_loss(&net, val.batch_images::<T>(vb)?, &labels, Phase::Train)?;
            let l = tape.value(loss).data()[0].f64();
            check_finite(l, "alpha", epoch, s)?;
            v_sum += l * vb.len() as f64;
            v_n += vb.len();
            let grads = tape.backward(loss)?.param_grads();
            adam.step(&mut net.store, &grads, ParamGroup::Arch);
            step += 1;
        }
        let alphas = net
            .cell_types()
            .into_iter()
            .map(|ty| AlphaSnapshot { cell_type: ty, alphas: net.alphas(ty) })
            .collect();
        report.epochs.push(SearchEpoch { epoch, train_loss: t_sum / t_n as f64, val_loss: v_sum / v_n as f64, lr, alphas });
    }
    Ok(SearchOutcome { genotypes: net.genotypes()?, report, supernet: net })
}
