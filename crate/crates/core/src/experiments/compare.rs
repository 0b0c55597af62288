//! Square vs circular vs integrated kernels over kernel sizes and seeds.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::data::Dataset;
use crate::experiments::robustness::mean_std;
use crate::experiments::svg::{LineChart, Series};
use crate::nn::layers::{Sequential, ShapeMode};
use crate::nn::models::{small_cnn, CnnConfig};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub shapes: Vec<ShapeMode>,
    pub kernel_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template; `kernel_size`, `shape`, `in_channels` and `num_classes` are
    /// set per run.
    pub model: CnnConfig,
    /// Template; `seed` is set per run.
    pub train: TrainConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            shapes: vec![ShapeMode::Square, ShapeMode::Circular, ShapeMode::Integrated],
            kernel_sizes: vec![3, 5, 7],
            seeds: (0..5).collect(),
            model: CnnConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.kernel_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("compare needs at least one shape, kernel size and seed".into()));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel sizes must be odd, got {k}")));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareRow {
    pub shape: ShapeMode,
    pub k: usize,
    pub seed: u64,
    pub final_test_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareSummary {
    pub shape: ShapeMode,
    pub k: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    /// Long format: `shape,K,seed,final_test_err`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("shape,K,seed,final_test_err\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.shape, r.k, r.seed, r.final_test_err);
        }
        s
    }

    /// Mean and sample standard deviation per `(shape, K)` in first-seen order.
    pub fn summary(&self) -> Vec<CompareSummary> {
        let mut keys: Vec<(ShapeMode, usize)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.shape, r.k)) {
                keys.push((r.shape, r.k));
            }
        }
        keys.into_iter()
            .map(|(shape, k)| {
                let errs: Vec<f64> = self.rows.iter().filter(|r| r.shape == shape && r.k == k).map(|r| r.final_test_err).collect();
                let (mean, std) = mean_std(&errs);
                CompareSummary { shape, k, runs: errs.len(), mean, std }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("shape,K,runs,mean_err,std_err\n");
        for r in self.summary() {
            let _ = writeln!(s, "{},{},{},{},{}", r.shape, r.k, r.runs, r.mean, r.std);
        }
        s
    }

    pub fn mean(&self, shape: ShapeMode, k: usize) -> Option<f64> {
        self.summary().into_iter().find(|s| s.shape == shape && s.k == k).map(|s| s.mean)
    }

    /// Test error against kernel size, one line per kernel shape.
    pub fn to_svg(&self) -> String {
        let summary = self.summary();
        let mut shapes: Vec<ShapeMode> = Vec::new();
        summary.iter().for_each(|s| {
            if !shapes.contains(&s.shape) {
                shapes.push(s.shape);
            }
        });
        let series = shapes
            .into_iter()
            .map(|shape| Series {
                name: shape.to_string(),
                points: summary.iter().filter(|s| s.shape == shape).map(|s| (s.k as f64, s.mean, s.std)).collect(),
            })
            .collect();
        LineChart { title: "Test error by kernel size".into(), x_label: "kernel size K".into(), y_label: "test error".into(), series }
            .render()
    }
}

/// Trains every `(shape, K, seed)` combination on the same data. Seed `s`
/// fixes both the initialization and the batch order, so runs sharing a seed
/// differ only in the kernel shape. `on_trained` sees each trained model.
pub fn compare_kernels_with(
    cfg: &CompareConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_trained: impl FnMut(&CompareRow, &Sequential<f32>) -> Result<()>,
) -> Result<CompareReport> {
    cfg.validate()?;
    let (c, _, _) = train_set.image_dims();
    let mut report = CompareReport::default();
    for &shape in &cfg.shapes {
        for &k in &cfg.kernel_sizes {
            for &seed in &cfg.seeds {
                let model_cfg = CnnConfig { kernel_size: k, shape, in_channels: c, num_classes: train_set.num_classes(), ..cfg.model };
                let mut model = small_cnn::<f32>(&model_cfg, seed)?;
                let tr = train(&mut model, train_set, Some(test_set), &TrainConfig { seed, ..cfg.train.clone() })?;
                let final_test_err = tr.final_test_err().unwrap_or(f64::NAN);
                let row = CompareRow { shape, k, seed, final_test_err };
                on_trained(&row, &model)?;
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

pub fn compare_kernels(cfg: &CompareConfig, train_set: &Dataset, test_set: &Dataset) -> Result<CompareReport> {
    compare_kernels_with(cfg, train_set, test_set, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::data::{gen_synthetic, Split, SyntheticKind};
    use crate::integrated::IntegratedConfig;

    fn tiny() -> (CompareConfig, Dataset, Dataset) {
        let (tr, te) = gen_synthetic(SyntheticKind::RingVsCross, 6, 10, 0).unwrap().split_half(0, Split::Train, Split::Test);
        let cfg = CompareConfig {
            shapes: vec![ShapeMode::Square],
            kernel_sizes: vec![1],
            seeds: vec![3],
            model: CnnConfig { width: 2, blocks: 1, ..Default::default() },
            train: TrainConfig { epochs: 1, batch_size: 4, ..Default::default() },
        };
        (cfg, tr, te)
    }

    #[test]
    fn single_run_gives_one_row() {
        let (cfg, tr, te) = tiny();
        let r = compare_kernels(&cfg, &tr, &te).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!((r.rows[0].shape, r.rows[0].k, r.rows[0].seed), (ShapeMode::Square, 1, 3));
        let csv = r.to_csv();
        assert!(csv.starts_with("shape,K,seed,final_test_err\nsquare,1,3,"));
        assert_eq!(r.summary()[0].runs, 1);
        assert!(r.to_svg().contains("<polyline"));
    }

    #[test]
    fn integrated_with_p_one_reproduces_circular() {
        let (mut cfg, tr, te) = tiny();
        cfg.kernel_sizes = vec![3];
        cfg.shapes = vec![ShapeMode::Circular, ShapeMode::Integrated];
        cfg.model.integrated = IntegratedConfig { p_circular: 1.0, ..Default::default() };
        let r = compare_kernels(&cfg, &tr, &te).unwrap();
        assert_eq!(r.rows[0].final_test_err.to_bits(), r.rows[1].final_test_err.to_bits());
    }

    #[test]
    fn validation() {
        let (mut cfg, tr, te) = tiny();
        cfg.kernel_sizes = vec![4];
        assert!(compare_kernels(&cfg, &tr, &te).is_err());
        cfg.kernel_sizes.clear();
        assert!(cfg.validate().is_err());
    }
}
