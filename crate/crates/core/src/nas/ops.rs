//! Candidate operations of a search edge and the mixed operation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{ConvLayer, ConvSpec, SeparableConv, ShapeMode};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::pool::PoolParams;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "circ_sep_conv_5x5")]
    CircSepConv5x5,
    #[serde(rename = "circ_dil_conv_5x5")]
    CircDilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "zero")]
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::CircSepConv5x5,
        OpKind::CircDilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::Identity,
        OpKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::CircSepConv5x5 => "circ_sep_conv_5x5",
            OpKind::CircDilConv5x5 => "circ_dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
        }
    }

    pub fn is_circular(self) -> bool {
        matches!(self, OpKind::CircSepConv5x5 | OpKind::CircDilConv5x5)
    }

    /// `(kernel, dilation, shape)` of the separable convolutions.
    fn conv_geometry(self) -> Option<(usize, usize, ShapeMode)> {
        match self {
            OpKind::SepConv3x3 => Some((3, 1, ShapeMode::Square)),
            OpKind::SepConv5x5 => Some((5, 1, ShapeMode::Square)),
            OpKind::DilConv3x3 => Some((3, 2, ShapeMode::Square)),
            OpKind::DilConv5x5 => Some((5, 2, ShapeMode::Square)),
            OpKind::CircSepConv5x5 => Some((5, 1, ShapeMode::Circular)),
            OpKind::CircDilConv5x5 => Some((5, 2, ShapeMode::Circular)),
            _ => None,
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

/// Ordered candidate operations shared by every edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpace {
    ops: Vec<OpKind>,
}

impl Default for OpSpace {
    fn default() -> Self {
        Self { ops: OpKind::ALL.to_vec() }
    }
}

impl OpSpace {
    pub fn new(ops: Vec<OpKind>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Config("operation space is empty".into()));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(Error::Config(format!("operation `{op}` listed twice")));
            }
        }
        Ok(Self { ops })
    }

    /// The default space without circular operations.
    pub fn baseline() -> Self {
        Self { ops: OpKind::ALL.into_iter().filter(|k| !k.is_circular()).collect() }
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, kind: OpKind) -> Option<usize> {
        self.ops.iter().position(|&k| k == kind)
    }
}

/// An instantiated operation on `channels` channels.
#[derive(Debug, Clone)]
pub enum Op {
    /// relu → depthwise → pointwise → affine.
    Sep { kind: OpKind, conv: SeparableConv, scale: ParamId, shift: ParamId },
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Identity,
    /// Identity at stride 2: relu → 1×1 stride-2 conv → affine.
    Reduce { conv: ConvLayer, scale: ParamId, shift: ParamId },
    Zero { stride: usize },
}

pub(crate) fn affine_params<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> (ParamId, ParamId) {
    let scale = store.add_no_decay(format!("{name}.scale"), Tensor::full(&[channels], T::one()));
    let shift = store.add_no_decay(format!("{name}.shift"), Tensor::zeros(&[channels]));
    (scale, shift)
}

impl Op {
    pub fn new<T: Scalar>(
        kind: OpKind,
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        stride: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if let Some((k, d, shape)) = kind.conv_geometry() {
            let conv = SeparableConv::new(store, name, channels, channels, k, shape, stride, d, rng)?;
            let (scale, shift) = affine_params(store, name, channels);
            return Ok(Op::Sep { kind, conv, scale, shift });
        }
        Ok(match kind {
            OpKind::MaxPool3x3 => Op::MaxPool { stride },
            OpKind::AvgPool3x3 => Op::AvgPool { stride },
            OpKind::Identity if stride == 1 => Op::Identity,
            OpKind::Identity => {
                let spec = ConvSpec { stride, padding: 0, ..ConvSpec::same(channels, channels, 1, ShapeMode::Square) };
                let conv = ConvLayer::new(store, &format!("{name}.reduce"), spec, rng)?;
                let (scale, shift) = affine_params(store, name, channels);
                Op::Reduce { conv, scale, shift }
            }
            OpKind::Zero => Op::Zero { stride },
            _ => unreachable!("convolutions handled above"),
        })
    }

    pub fn kind(&self) -> OpKind {
        match self {
            Op::Sep { kind, .. } => *kind,
            Op::MaxPool { .. } => OpKind::MaxPool3x3,
            Op::AvgPool { .. } => OpKind::AvgPool3x3,
            Op::Identity | Op::Reduce { .. } => OpKind::Identity,
            Op::Zero { .. } => OpKind::Zero,
        }
    }

    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Op::Sep { conv, scale, shift, .. } => {
                let h = tape.relu(x);
                let h = conv.forward_tape(tape, store, h)?;
                let (s, b) = (tape.param(store, *scale), tape.param(store, *shift));
                tape.affine(h, s, b)
            }
            Op::MaxPool { stride } => tape.max_pool(x, PoolParams::new(3, *stride, 1)),
            Op::AvgPool { stride } => tape.avg_pool(x, PoolParams::new(3, *stride, 1)),
            Op::Identity => Ok(x),
            Op::Reduce { conv, scale, shift } => {
                let h = tape.relu(x);
                let h = conv.forward_tape(tape, store, h, false)?;
                let (s, b) = (tape.param(store, *scale), tape.param(store, *shift));
                tape.affine(h, s, b)
            }
            Op::Zero { stride } => {
                let dims = tape.value(x).dims().to_vec();
                let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                let out = [n, c, (h - 1) / stride + 1, (w - 1) / stride + 1];
                Ok(tape.input(Tensor::zeros(&out)))
            }
        }
    }
}

/// Records `Σ_o softmax(alpha)_o · o(x)` on the tape. `alpha` must hold one
/// logit per operation.
pub fn mixed_op_tape<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    alpha: Var,
    ops: &[Op],
) -> Result<Var> {
    if ops.is_empty() {
        return Err(Error::InvalidArgument("mixed operation over an empty op list".into()));
    }
    if tape.value(alpha).len() != ops.len() {
        return Err(Error::Shape(format!("{} alphas for {} operations", tape.value(alpha).len(), ops.len())));
    }
    let weights = tape.softmax(alpha);
    let mut terms = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter().enumerate() {
        terms.push((op.forward_tape(tape, store, x)?, i));
    }
    tape.weighted_sum(&terms, weights)
}

/// Mixed operation on a tensor, outside any tape.
pub fn mixed_op_forward<T: Scalar>(x: &Tensor<T>, alpha: &[T], ops: &[Op], store: &ParamStore<T>) -> Result<Tensor<T>> {
    if ops.is_empty() {
        return Err(Error::InvalidArgument("mixed operation over an empty op list".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let a = tape.input(Tensor::from_vec(&[alpha.len()], alpha.to_vec())?);
    let out = mixed_op_tape(&mut tape, store, xv, a, ops)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn all_ops(store: &mut ParamStore<f64>, stride: usize) -> Vec<Op> {
        let mut rng = SplitMix64::seed_from_u64(3);
        OpKind::ALL.iter().map(|&k| Op::new(k, store, k.name(), 3, stride, &mut rng).unwrap()).collect()
    }

    fn input(rng: &mut SplitMix64) -> Tensor<f64> {
        Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn single(op: &Op, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = op.forward_tape(&mut tape, store, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn names_round_trip_and_baseline_excludes_circular() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert_eq!(OpSpace::baseline().len(), 8);
        assert!(OpSpace::baseline().ops().iter().all(|k| !k.is_circular()));
        assert!(OpSpace::new(vec![OpKind::Zero, OpKind::Zero]).is_err());
        assert!(OpSpace::new(vec![]).is_err());
    }

    #[test]
    fn every_op_preserves_shape_at_stride_one_and_halves_at_two() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let x = input(&mut rng);
        let mut store = ParamStore::new();
        for op in all_ops(&mut store, 1) {
            assert_eq!(single(&op, &store, &x).dims(), &[2, 3, 8, 8], "{}", op.kind());
        }
        let mut store = ParamStore::new();
        for op in all_ops(&mut store, 2) {
            assert_eq!(single(&op, &store, &x).dims(), &[2, 3, 4, 4], "{}", op.kind());
        }
    }

    #[test]
    fn uniform_alphas_average_the_ops() {
        let mut rng = SplitMix64::seed_from_u64(2);
        let x = input(&mut rng);
        let mut store = ParamStore::new();
        let ops = all_ops(&mut store, 1);
        let y = mixed_op_forward(&x, &[0.7; 10], &ops, &store).unwrap();
        let mut want = Tensor::zeros(x.dims());
        for op in &ops {
            want.axpy(0.1, &single(op, &store, &x)).unwrap();
        }
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_alpha_selects_one_op() {
        let mut rng = SplitMix64::seed_from_u64(4);
        let x = input(&mut rng);
        let mut store = ParamStore::new();
        let ops = all_ops(&mut store, 1);
        for k in 0..ops.len() {
            let mut alpha = vec![0.0; ops.len()];
            alpha[k] = 50.0;
            let y = mixed_op_forward(&x, &alpha, &ops, &store).unwrap();
            let want = single(&ops[k], &store, &x);
            let err = y.data().iter().zip(want.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-8, "{}: {err}", ops[k].kind());
        }
    }

    #[test]
    fn identity_and_zero_halve() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let x = input(&mut rng);
        let mut store = ParamStore::<f64>::new();
        let ops = vec![
            Op::new(OpKind::Identity, &mut store, "id", 3, 1, &mut rng).unwrap(),
            Op::new(OpKind::Zero, &mut store, "z", 3, 1, &mut rng).unwrap(),
        ];
        let y = mixed_op_forward(&x, &[0.0, 0.0], &ops, &store).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        assert!(mixed_op_forward(&x, &[], &[], &store).is_err());
        assert!(mixed_op_forward(&x, &[0.0], &ops, &store).is_err());
    }
}
