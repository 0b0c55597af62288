//! Convolution layers with square, circular and integrated kernels, and the
//! sequential model container.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::integrated::IntegratedConv;
use crate::nn::conv::{self, Conv2dParams};
use crate::nn::params::{kaiming_uniform, ParamGroup, ParamId, ParamStore};
use crate::nn::pool::PoolParams;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::transform::TransformMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeMode {
    Square,
    Circular,
    /// Shared weights, square or circular sampling drawn per iteration.
    Integrated,
}

impl std::str::FromStr for ShapeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "square" => Ok(ShapeMode::Square),
            "circular" | "circle" => Ok(ShapeMode::Circular),
            "integrated" | "int-sc" => Ok(ShapeMode::Integrated),
            other => Err(Error::Config(format!("unknown kernel shape `{other}`"))),
        }
    }
}

impl std::fmt::Display for ShapeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeMode::Square => "square",
            ShapeMode::Circular => "circular",
            ShapeMode::Integrated => "integrated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    Full,
    Depthwise,
}

/// Hyperparameters of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub shape: ShapeMode,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub grouping: Grouping,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, shape: ShapeMode) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            shape,
            stride: 1,
            padding: kernel_size / 2,
            dilation: 1,
            grouping: Grouping::Full,
            bias: false,
        }
    }
}

/// A convolution whose circular variant runs as a standard convolution over
/// the re-parameterized kernel `Wᵀ B`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    /// `B` of the circular sampling; identity for square layers.
    pub transform: Arc<TransformMatrix>,
}

/// Saved forward state for [`ConvLayer::backward`].
pub struct ConvContext<T> {
    input: Tensor<T>,
    effective_weight: Tensor<T>,
    transform: Arc<TransformMatrix>,
    params: Conv2dParams,
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl ConvLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut SplitMix64) -> Result<Self> {
        let k = spec.kernel_size;
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
        }
        let cin_g = match spec.grouping {
            Grouping::Full => spec.in_channels,
            Grouping::Depthwise => {
                if spec.in_channels != spec.out_channels {
                    return Err(Error::InvalidArgument(format!(
                        "depthwise convolution needs equal channels, got {} -> {}",
                        spec.in_channels, spec.out_channels
                    )));
                }
                1
            }
        };
        let transform = match spec.shape {
            ShapeMode::Square => TransformMatrix::identity(k, spec.dilation)?,
            ShapeMode::Circular | ShapeMode::Integrated => TransformMatrix::circular(k, spec.dilation)?,
        };
        let w = kaiming_uniform(&[spec.out_channels, cin_g, k, k], cin_g * k * k, rng);
        let weight = store.add(format!("{name}.weight"), ParamGroup::Weight, w);
        let bias = spec.bias.then(|| store.add_no_decay(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Ok(Self { weight, bias, spec, transform: Arc::new(transform) })
    }

    pub fn conv_params(&self) -> Conv2dParams {
        Conv2dParams {
            stride: self.spec.stride,
            padding: self.spec.padding,
            dilation: self.spec.dilation,
            groups: match self.spec.grouping {
                Grouping::Full => 1,
                Grouping::Depthwise => self.spec.in_channels,
            },
        }
    }

    /// Whether a forward pass samples circularly, given the branch chosen for
    /// integrated layers.
    fn uses_circular(&self, circular_branch: bool) -> bool {
        match self.spec.shape {
            ShapeMode::Square => false,
            ShapeMode::Circular => true,
            ShapeMode::Integrated => circular_branch,
        }
    }

    /// Records the layer on a tape. `circular_branch` only matters for
    /// integrated layers.
    pub fn forward_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        circular_branch: bool,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let w = if self.uses_circular(circular_branch) { tape.reparameterize(w, self.transform.clone())? } else { w };
        let b = self.bias.map(|id| tape.param(store, id));
        tape.conv2d(x, w, b, self.conv_params())
    }

    /// Kernel the convolution actually applies.
    pub fn effective_weight<T: Scalar>(&self, store: &ParamStore<T>, circular_branch: bool) -> Tensor<T> {
        let w = store.get(self.weight);
        if !self.uses_circular(circular_branch) {
            return w.clone();
        }
        let k2 = self.transform.dim();
        let mut out = Tensor::zeros(w.dims());
        for (src, dst) in w.data().chunks_exact(k2).zip(out.data_mut().chunks_exact_mut(k2)) {
            self.transform.apply_transpose_into(src, dst);
        }
        out
    }

    /// Direct forward pass outside a tape, keeping the context for
    /// [`ConvLayer::backward`].
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        circular_branch: bool,
    ) -> Result<(Tensor<T>, ConvContext<T>)> {
        let effective_weight = self.effective_weight(store, circular_branch);
        let params = self.conv_params();
        let out = conv::conv2d(input, &effective_weight, self.bias.map(|b| store.get(b)), &params)?;
        let transform = if self.uses_circular(circular_branch) {
            self.transform.clone()
        } else {
            Arc::new(TransformMatrix::identity(self.spec.kernel_size, self.spec.dilation)?)
        };
        Ok((out, ConvContext { input: input.clone(), effective_weight, transform, params }))
    }

    /// Gradients of a direct forward pass. The weight gradient of a circular
    /// layer is the effective-kernel gradient pushed through `B`.
    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>, ctx: &ConvContext<T>) -> Result<ConvGrads<T>> {
        let g = conv::conv2d_backward(grad_out, &ctx.input, &ctx.effective_weight, &ctx.params, true)?;
        let weight = if ctx.transform.is_identity() {
            g.weight
        } else {
            let k2 = ctx.transform.dim();
            let mut gw = Tensor::zeros(g.weight.dims());
            for (src, dst) in g.weight.data().chunks_exact(k2).zip(gw.data_mut().chunks_exact_mut(k2)) {
                ctx.transform.apply_into(src, dst);
            }
            gw
        };
        Ok(ConvGrads { input: g.input.expect("input gradient requested"), weight, bias: self.bias.map(|_| g.bias) })
    }
}

/// Depthwise convolution followed by a 1×1 pointwise convolution.
#[derive(Debug, Clone)]
pub struct SeparableConv {
    pub depthwise: ConvLayer,
    pub pointwise: ConvLayer,
}

impl SeparableConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        shape: ShapeMode,
        stride: usize,
        dilation: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let depthwise = ConvLayer::new(
            store,
            &format!("{name}.dw"),
            ConvSpec {
                in_channels,
                out_channels: in_channels,
                kernel_size,
                shape,
                stride,
                padding: dilation * (kernel_size / 2),
                dilation,
                grouping: Grouping::Depthwise,
                bias: false,
            },
            rng,
        )?;
        let pointwise =
            ConvLayer::new(store, &format!("{name}.pw"), ConvSpec::same(in_channels, out_channels, 1, ShapeMode::Square), rng)?;
        Ok(Self { depthwise, pointwise })
    }

    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.depthwise.forward_tape(tape, store, x, true)?;
        self.pointwise.forward_tape(tape, store, h, false)
    }
}

/// Mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A trainable network mapping `(N, C, H, W)` images to `(N, classes)` logits.
pub trait Model<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn forward(&self, tape: &mut Tape<T>, x: Var, phase: Phase) -> Result<Var>;
    /// Called once per training iteration before the forward pass.
    fn begin_iteration(&mut self, _iteration: u64) {}
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    Integrated(IntegratedConv),
    Affine { scale: ParamId, shift: ParamId },
    Relu,
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    GlobalAvgPool,
    Flatten,
    Linear { weight: ParamId, bias: ParamId },
}

/// A chain of layers with its own parameter store.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub store: ParamStore<T>,
    pub layers: Vec<Layer>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { store: ParamStore::new(), layers: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn conv(&mut self, spec: ConvSpec, rng: &mut SplitMix64) -> Result<&mut Self> {
        let name = format!("layer{}", self.layers.len());
        let layer = ConvLayer::new(&mut self.store, &name, spec, rng)?;
        Ok(self.push(Layer::Conv(layer)))
    }

    pub fn affine(&mut self, channels: usize) -> &mut Self {
        let name = format!("layer{}", self.layers.len());
        let scale = self.store.add_no_decay(format!("{name}.scale"), Tensor::full(&[channels], T::one()));
        let shift = self.store.add_no_decay(format!("{name}.shift"), Tensor::zeros(&[channels]));
        self.push(Layer::Affine { scale, shift })
    }

    pub fn linear(&mut self, in_features: usize, out_features: usize, rng: &mut SplitMix64) -> &mut Self {
        let name = format!("layer{}", self.layers.len());
        let w = kaiming_uniform(&[out_features, in_features], in_features, rng);
        let weight = self.store.add(format!("{name}.weight"), ParamGroup::Weight, w);
        let bias = self.store.add_no_decay(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        self.push(Layer::Linear { weight, bias })
    }

    pub fn integrated_layers(&self) -> impl Iterator<Item = &IntegratedConv> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Integrated(ic) => Some(ic),
            _ => None,
        })
    }

    pub fn integrated_layers_mut(&mut self) -> impl Iterator<Item = &mut IntegratedConv> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Integrated(ic) => Some(ic),
            _ => None,
        })
    }
}

impl<T: Scalar> Model<T> for Sequential<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape<T>, mut x: Var, phase: Phase) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => c.forward_tape(tape, &self.store, x, true)?,
                Layer::Integrated(ic) => ic.forward_tape(tape, &self.store, x, phase)?,
                Layer::Affine { scale, shift } => {
                    let s = tape.param(&self.store, *scale);
                    let b = tape.param(&self.store, *shift);
                    tape.affine(x, s, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool(p) => tape.max_pool(x, *p)?,
                Layer::AvgPool(p) => tape.avg_pool(x, *p)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Flatten => {
                    let dims = tape.value(x).dims().to_vec();
                    let n = dims[0];
                    tape.reshape(x, &[n, dims[1..].iter().product()])?
                }
                Layer::Linear { weight, bias } => {
                    let w = tape.param(&self.store, *weight);
                    let b = tape.param(&self.store, *bias);
                    tape.linear(x, w, Some(b))?
                }
            };
        }
        Ok(x)
    }

    fn begin_iteration(&mut self, iteration: u64) {
        for ic in self.integrated_layers_mut() {
            ic.draw_branch(iteration);
        }
    }
}

/// Convolution of `input` by a layer, outside any tape.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, ConvContext<T>)> {
    let (_, c, _, _) = input.nchw()?;
    if c != layer.spec.in_channels {
        return Err(shape_err!("input has {c} channels, layer expects {}", layer.spec.in_channels));
    }
    layer.forward(store, input, true)
}

/// Gradients of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(grad_out: &Tensor<T>, layer: &ConvLayer, ctx: &ConvContext<T>) -> Result<ConvGrads<T>> {
    layer.backward(grad_out, ctx)
}

/// Separable convolution outside a tape: depthwise then pointwise.
pub fn separable_conv<T: Scalar>(input: &Tensor<T>, sep: &SeparableConv, store: &ParamStore<T>) -> Result<Tensor<T>> {
    if sep.depthwise.spec.grouping != Grouping::Depthwise || sep.pointwise.spec.kernel_size != 1 {
        return Err(Error::InvalidArgument("separable convolution needs a depthwise and a 1x1 layer".into()));
    }
    let (h, _) = sep.depthwise.forward(store, input, true)?;
    Ok(sep.pointwise.forward(store, &h, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(dims: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn circular_constant_input_all_ones() {
        let mut rng = SplitMix64::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mut spec = ConvSpec::same(1, 1, 3, ShapeMode::Circular);
        spec.padding = 0;
        let layer = ConvLayer::new(&mut store, "c", spec, &mut rng).unwrap();
        *store.get_mut(layer.weight) = Tensor::full(&[1, 1, 3, 3], 1.0);
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let (y, _) = conv2d_forward(&x, &layer, &store).unwrap();
        assert!((y.data()[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn square_mode_is_plain_convolution() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = ConvLayer::new(&mut store, "c", ConvSpec::same(2, 3, 3, ShapeMode::Square), &mut rng).unwrap();
        let x = random(&[2, 2, 5, 5], &mut rng);
        let (y, _) = conv2d_forward(&x, &layer, &store).unwrap();
        let z = conv::conv2d(&x, store.get(layer.weight), None, &layer.conv_params()).unwrap();
        assert_eq!(y, z);
    }

    #[test]
    fn unit_kernel_backward_passes_gradient_through() {
        let mut rng = SplitMix64::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let layer = ConvLayer::new(&mut store, "c", ConvSpec::same(1, 1, 1, ShapeMode::Circular), &mut rng).unwrap();
        *store.get_mut(layer.weight) = Tensor::full(&[1, 1, 1, 1], 1.0);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let (_, ctx) = conv2d_forward(&x, &layer, &store).unwrap();
        let g = random(&[1, 1, 4, 4], &mut rng);
        let grads = conv2d_backward(&g, &layer, &ctx).unwrap();
        assert_eq!(grads.input, g);
    }

    #[test]
    fn depthwise_requires_matching_channels() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mut spec = ConvSpec::same(2, 3, 3, ShapeMode::Square);
        spec.grouping = Grouping::Depthwise;
        assert!(ConvLayer::new(&mut store, "c", spec, &mut rng).is_err());
    }

    #[test]
    fn separable_identity_and_composition() {
        let mut rng = SplitMix64::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let sep = SeparableConv::new(&mut store, "s", 3, 3, 1, ShapeMode::Square, 1, 1, &mut rng).unwrap();
        *store.get_mut(sep.depthwise.weight) = Tensor::full(&[3, 1, 1, 1], 1.0);
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        *store.get_mut(sep.pointwise.weight) = eye;
        let x = random(&[1, 3, 4, 4], &mut rng);
        assert_eq!(separable_conv(&x, &sep, &store).unwrap(), x);

        let sep = SeparableConv::new(&mut store, "t", 3, 4, 5, ShapeMode::Circular, 1, 1, &mut rng).unwrap();
        let y = separable_conv(&x, &sep, &store).unwrap();
        let dw = conv::conv2d(&x, &sep.depthwise.effective_weight(&store, true), None, &sep.depthwise.conv_params()).unwrap();
        let z = conv::conv2d(&dw, store.get(sep.pointwise.weight), None, &sep.pointwise.conv_params()).unwrap();
        assert_eq!(y, z);
    }

    #[test]
    fn circular_depthwise_constant_input_scales_by_kernel_sum() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let mut spec = ConvSpec::same(2, 2, 3, ShapeMode::Circular);
        spec.grouping = Grouping::Depthwise;
        spec.padding = 0;
        let layer = ConvLayer::new(&mut store, "d", spec, &mut rng).unwrap();
        let x = Tensor::full(&[1, 2, 5, 5], 0.5);
        let (y, _) = conv2d_forward(&x, &layer, &store).unwrap();
        let w = store.get(layer.weight).data().to_vec();
        for c in 0..2 {
            let sum: f64 = w[c * 9..(c + 1) * 9].iter().sum();
            for v in &y.data()[c * 9..(c + 1) * 9] {
                assert!((v - 0.5 * sum).abs() < 1e-12);
            }
        }
    }
}
