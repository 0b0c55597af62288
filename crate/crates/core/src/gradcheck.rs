//! Central-difference gradient checking.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::integrated::{Branch, IntegratedConfig, IntegratedConv};
use crate::nn::layers::{ConvSpec, Grouping, Layer, Model, Phase, Sequential, ShapeMode};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::pool::PoolParams;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Largest allowed relative error per parameter tensor.
    pub tolerance: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tolerance: 1e-6, max_entries: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_err: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over checked entries.
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.rel_err))
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Relative error between two gradient vectors, `0` when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn checked_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check_function(
    name: &str,
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<TensorCheck> {
    if analytic.dims() != x.dims() {
        return Err(Error::Shape(format!("gradient dims {:?} differ from input dims {:?}", analytic.dims(), x.dims())));
    }
    let idx = checked_indices(x.len(), cfg.max_entries);
    let mut probe = x.clone();
    let mut num = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - cfg.eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        num.push((plus - minus) / (2.0 * cfg.eps));
    }
    let ana: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
    let max_abs_err = ana.iter().zip(&num).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    Ok(TensorCheck { name: name.to_string(), entries: idx.len(), max_abs_err, rel_err: relative_error(&ana, &num) })
}

fn model_loss<M: Model<f64>>(model: &M, x: &Tensor<f64>, labels: &[usize], phase: Phase) -> Result<(Tape<f64>, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let logits = model.forward(&mut tape, xv, phase)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((tape, loss))
}

/// Checks the gradient of the mean cross-entropy with respect to every
/// parameter of `model`. Stochastic layers must have their branches fixed
/// before the call.
pub fn check_model<M: Model<f64>>(
    model: &mut M,
    x: &Tensor<f64>,
    labels: &[usize],
    phase: Phase,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (tape, loss) = model_loss(model, x, labels, phase)?;
    let grads: BTreeMap<ParamId, Tensor<f64>> = tape.backward(loss)?.param_grads();
    let ids: Vec<(ParamId, String)> = model.store().iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (id, name) in ids {
        let value = model.store().get(id).clone();
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(value.dims()));
        let idx = checked_indices(value.len(), cfg.max_entries);
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = value.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                model.store_mut().get_mut(id).data_mut()[i] = v;
                let (t, l) = model_loss(model, x, labels, phase)?;
                Ok(t.value(l).data()[0])
            };
            let plus = eval(orig + cfg.eps)?;
            let minus = eval(orig - cfg.eps)?;
            model.store_mut().get_mut(id).data_mut()[i] = orig;
            num.push((plus - minus) / (2.0 * cfg.eps));
        }
        let ana: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        let max_abs_err = ana.iter().zip(&num).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        tensors.push(TensorCheck { name, entries: idx.len(), max_abs_err, rel_err: relative_error(&ana, &num) });
    }
    Ok(GradCheckReport { tensors, tolerance: cfg.tolerance })
}

/// Adds `U(-amp, amp)` to every parameter. Freshly initialized networks have
/// zero shifts and biases, which places many ReLU inputs exactly on the kink.
pub fn perturb_params(store: &mut ParamStore<f64>, amp: f64, rng: &mut SplitMix64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-amp..amp));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub layer: String,
    pub report: GradCheckReport,
}

fn conv(cin: usize, cout: usize, k: usize, shape: ShapeMode, dilation: usize, grouping: Grouping) -> ConvSpec {
    ConvSpec { in_channels: cin, out_channels: cout, kernel_size: k, shape, stride: 1, padding: dilation * (k / 2), dilation, grouping, bias: true }
}

/// `body`, then affine → relu → global average pooling → linear head.
fn probe(seed: u64, channels: usize, body: impl FnOnce(&mut Sequential<f64>, &mut SplitMix64) -> Result<()>) -> Result<Sequential<f64>> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut net = Sequential::new();
    body(&mut net, &mut rng)?;
    net.affine(channels).push(Layer::Relu).push(Layer::GlobalAvgPool);
    net.linear(channels, 3, &mut rng);
    perturb_params(&mut net.store, 0.2, &mut rng);
    Ok(net)
}

/// Central-difference checks of every layer type on small random networks
/// and inputs.
pub fn layer_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    use Grouping::{Depthwise, Full};
    use ShapeMode::{Circular, Square};
    let c = 3;
    let mut nets: Vec<(String, Sequential<f64>)> = Vec::new();
    for (name, k, shape, d) in [
        ("square_conv_3x3", 3, Square, 1),
        ("circular_conv_3x3", 3, Circular, 1),
        ("circular_conv_5x5", 5, Circular, 1),
        ("dilated_square_conv_3x3", 3, Square, 2),
        ("dilated_circular_conv_3x3", 3, Circular, 2),
    ] {
        nets.push((name.into(), probe(seed, c, |n, r| n.conv(conv(2, c, k, shape, d, Full), r).map(|_| ()))?));
    }
    for (name, k, shape) in [("separable_square_3x3", 3, Square), ("separable_circular_5x5", 5, Circular)] {
        let net = probe(seed, c, |n, r| {
            n.conv(conv(2, c, 1, Square, 1, Full), r)?;
            n.conv(conv(c, c, k, shape, 1, Depthwise), r)?;
            n.conv(conv(c, c, 1, Square, 1, Full), r)?;
            Ok(())
        })?;
        nets.push((name.into(), net));
    }
    for (name, branch) in [("integrated_square_branch", Branch::Square), ("integrated_circular_branch", Branch::Circular)] {
        let net = probe(seed, c, |n, r| {
            let mut ic = IntegratedConv::new(&mut n.store, "int", conv(2, c, 3, Square, 1, Full), IntegratedConfig::default(), seed, r)?;
            ic.set_choice(branch);
            n.push(Layer::Integrated(ic));
            Ok(())
        })?;
        nets.push((name.into(), net));
    }
    for (name, pool) in [("max_pool", Layer::MaxPool(PoolParams::new(3, 2, 1))), ("avg_pool", Layer::AvgPool(PoolParams::new(3, 2, 1)))] {
        let net = probe(seed, c, |n, r| {
            n.conv(conv(2, c, 3, Square, 1, Full), r)?;
            n.push(pool);
            Ok(())
        })?;
        nets.push((name.into(), net));
    }
    let mut rng = SplitMix64::seed_from_u64(seed ^ 0x5eed);
    let mut linear = Sequential::new();
    linear.push(Layer::Flatten);
    linear.linear(2 * 6 * 6, 3, &mut rng);
    perturb_params(&mut linear.store, 0.2, &mut rng);
    nets.push(("linear".into(), linear));

    let x = Tensor::from_vec(&[2, 2, 6, 6], (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let labels = [0, 2];
    nets.into_iter()
        .map(|(layer, mut net)| Ok(SuiteEntry { report: check_model(&mut net, &x, &labels, Phase::Train, cfg)?, layer }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn subsampling_spreads_indices() {
        assert_eq!(checked_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(checked_indices(3, Some(5)), vec![0, 1, 2]);
    }

    #[test]
    fn cubic_function_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.2, 2.0]).unwrap();
        let f = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v * v * v).sum::<f64>());
        let g = x.map(|v| 3.0 * v * v);
        let r = check_function("x", f, &x, &g, &GradCheckConfig::default()).unwrap();
        assert!(r.rel_err < 1e-9, "{r:?}");
        let wrong = x.map(|v| 2.0 * v);
        let r = check_function("x", f, &x, &wrong, &GradCheckConfig::default()).unwrap();
        assert!(r.rel_err > 0.1);
    }

    #[test]
    fn layer_suite_passes() {
        let suite = layer_suite(1, &GradCheckConfig { max_entries: Some(12), ..Default::default() }).unwrap();
        assert_eq!(suite.len(), 12);
        for e in &suite {
            assert!(e.report.passed(), "{}: {:?}", e.layer, e.report.worst());
        }
    }
}
