//! Error under random rotations or shears of the test images.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::data::Dataset;
use crate::experiments::warp::{warp_image, WarpMode};
use crate::nn::layers::Model;
use crate::rng;
use crate::tensor::Scalar;
use crate::train::error_rate;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessSweep {
    /// Half-widths `a` in degrees; each image is warped by an angle drawn
    /// uniformly from `(-a, a)`.
    pub angle_ranges: Vec<u32>,
    pub mode: WarpMode,
    pub trials: usize,
    pub seed: u64,
}

impl Default for RobustnessSweep {
    fn default() -> Self {
        Self { angle_ranges: (1..=8).map(|i| i * 10).collect(), mode: WarpMode::Rotate, trials: 3, seed: 0 }
    }
}

impl RobustnessSweep {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.angle_ranges.iter().find(|&&a| a == 0 || a >= 90) {
            return Err(Error::Config(format!("angle range {a} outside (0, 90)")));
        }
        if self.trials == 0 {
            return Err(Error::Config("robustness.trials must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialError {
    pub a: u32,
    pub trial: usize,
    pub err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangeSummary {
    pub a: u32,
    pub mean_err: f64,
    /// Sample standard deviation over trials; 0 for a single trial.
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessTable {
    pub mode: WarpMode,
    pub trials: Vec<TrialError>,
    pub summary: Vec<RangeSummary>,
}

impl RobustnessTable {
    pub fn get(&self, a: u32) -> Option<&RangeSummary> {
        self.summary.iter().find(|s| s.a == a)
    }

    /// `mode,a,trial,err` rows, then one `mean` and one `std` row per range.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,a,trial,err\n");
        for t in &self.trials {
            let _ = writeln!(s, "{},{},{},{}", self.mode, t.a, t.trial, t.err);
        }
        for r in &self.summary {
            let _ = writeln!(s, "{},{},mean,{}", self.mode, r.a, r.mean_err);
            let _ = writeln!(s, "{},{},std,{}", self.mode, r.a, r.std_err);
        }
        s
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Warps every image by its own angle in `(-a, a)`; all channels of an image
/// share the angle.
pub fn warp_dataset(data: &Dataset, a: f64, mode: WarpMode, rng: &mut impl Rng) -> Result<Dataset> {
    let (_, h, w) = data.image_dims();
    let angles: Vec<f64> = (0..data.len()).map(|_| if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 }).collect();
    let mut failure = None;
    let out = data.map_planes(|i, plane| match warp_image(plane, h, w, angles[i], mode) {
        Ok(p) => p,
        Err(e) => {
            failure.get_or_insert(e);
            vec![0.0; plane.len()]
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Error of `model` on independently warped copies of `test`, `trials` times
/// per angle range.
pub fn robustness_eval<T: Scalar, M: Model<T>>(model: &M, test: &Dataset, sweep: &RobustnessSweep) -> Result<RobustnessTable> {
    sweep.validate()?;
    let stream = rng::stream_id(&format!("robustness.{}", sweep.mode));
    let mut trials = Vec::new();
    let mut summary = Vec::new();
    for &a in &sweep.angle_ranges {
        let mut errs = Vec::with_capacity(sweep.trials);
        for trial in 0..sweep.trials {
            let mut r = rng::stream(sweep.seed, stream, ((a as u64) << 32) | trial as u64);
            let warped = warp_dataset(test, a as f64, sweep.mode, &mut r)?;
            let err = error_rate(model, &warped, 64)?;
            trials.push(TrialError { a, trial, err });
            errs.push(err);
        }
        let (mean_err, std_err) = mean_std(&errs);
        summary.push(RangeSummary { a, mean_err, std_err });
    }
    Ok(RobustnessTable { mode: sweep.mode, trials, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use crate::experiments::data::{gen_synthetic, SyntheticKind};
    use crate::nn::layers::Phase;
    use crate::nn::params::ParamStore;
    use crate::tensor::Tensor;

    /// Predicts class 1 for every input.
    struct Constant(ParamStore<f64>);

    impl Model<f64> for Constant {
        fn store(&self) -> &ParamStore<f64> {
            &self.0
        }
        fn store_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.0
        }
        fn forward(&self, tape: &mut Tape<f64>, x: Var, _: Phase) -> Result<Var> {
            let n = tape.value(x).dims()[0];
            let logits = (0..n).flat_map(|_| [0.0, 1.0]).collect();
            Ok(tape.input(Tensor::from_vec(&[n, 2], logits)?))
        }
    }

    #[test]
    fn constant_model_error_is_flat() {
        let data = gen_synthetic(SyntheticKind::RingVsCross, 6, 12, 1).unwrap();
        let sub = data.subset(&[0, 1, 2, 3, 5, 7, 9], data.split);
        let expected = 1.0 - sub.max_class_prior();
        let table = robustness_eval(&Constant(ParamStore::new()), &sub, &RobustnessSweep::default()).unwrap();
        assert_eq!(table.summary.len(), 8);
        for r in &table.summary {
            assert!((r.mean_err - expected).abs() < 1e-15);
            assert_eq!(r.std_err, 0.0);
        }
        let csv = table.to_csv();
        assert!(csv.starts_with("mode,a,trial,err\nrotate,10,0,"));
        assert_eq!(csv.lines().count(), 1 + 8 * 3 + 8 * 2);
        assert!(csv.contains("rotate,80,std,0\n"));
    }

    #[test]
    fn empty_sweep_and_validation() {
        let data = gen_synthetic(SyntheticKind::OrientedBars, 2, 10, 0).unwrap();
        let sweep = RobustnessSweep { angle_ranges: vec![], ..Default::default() };
        let t = robustness_eval(&Constant(ParamStore::new()), &data, &sweep).unwrap();
        assert!(t.summary.is_empty() && t.trials.is_empty());
        assert!(RobustnessSweep { angle_ranges: vec![90], ..Default::default() }.validate().is_err());
        assert!(RobustnessSweep { trials: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
