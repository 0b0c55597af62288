//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it in reverse. Nodes
//! only carry gradients when some ancestor is a parameter leaf.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::nn::conv::{self, Conv2dParams};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::pool::{self, PoolParams};
use crate::tensor::{Scalar, Tensor};
use crate::transform::TransformMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, params: Conv2dParams },
    Reparameterize { weight: Var, transform: Arc<TransformMatrix> },
    Sum(Vec<Var>),
    Scale(Var, T),
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, params: PoolParams },
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Affine { input: Var, scale: Var, shift: Var },
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    WeightedSum { terms: Vec<(Var, usize)>, weights: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    DotConst { input: Var, other: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let out = conv::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), &params)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, params }, rg))
    }

    /// Replaces every `K×K` slice of a `(Cout, Cin, K, K)` weight by `Wᵀ B`.
    pub fn reparameterize(&mut self, weight: Var, transform: Arc<TransformMatrix>) -> Result<Var> {
        let w = self.value(weight);
        let k2 = transform.dim();
        if w.rank() != 4 || w.dims()[2] * w.dims()[3] != k2 {
            return Err(shape_err!("weight {:?} does not match a {}-slot transform", w.dims(), k2));
        }
        let mut out = Tensor::zeros(w.dims());
        for (src, dst) in w.data().chunks_exact(k2).zip(out.data_mut().chunks_exact_mut(k2)) {
            transform.apply_transpose_into(src, dst);
        }
        let rg = self.rg(&[weight]);
        Ok(self.push(out, Op::Reparameterize { weight, transform }, rg))
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms.first().ok_or_else(|| Error::InvalidArgument("sum of no terms".into()))?;
        let mut out = self.value(first).clone();
        for &t in &terms[1..] {
            out.axpy(T::one(), self.value(t))?;
        }
        let rg = self.rg(terms);
        Ok(self.push(out, Op::Sum(terms.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sum(&[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn max_pool(&mut self, x: Var, params: PoolParams) -> Result<Var> {
        let (out, argmax) = pool::max_pool2d(self.value(x), &params)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { input: x, argmax }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, params: PoolParams) -> Result<Var> {
        let out = pool::avg_pool2d(self.value(x), &params)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool { input: x, params }, rg))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let data = self.value(x).data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// `(N, F) x (Out, F)ᵀ + b`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let (n, f) = match *x.dims() {
            [n, f] => (n, f),
            _ => return Err(shape_err!("linear input must be (N, F), got {:?}", x.dims())),
        };
        let out_f = match *w.dims() {
            [o, wf] if wf == f => o,
            _ => return Err(shape_err!("linear weight {:?} does not match {f} features", w.dims())),
        };
        let mut out = Tensor::zeros(&[n, out_f]);
        T::gemm(n, f, out_f, T::one(), x.data(), f as isize, 1, w.data(), 1, f as isize, T::zero(), out.data_mut(), out_f as isize, 1);
        if let Some(b) = bias {
            let b = self.value(b);
            if b.len() != out_f {
                return Err(shape_err!("linear bias has {} entries, expected {out_f}", b.len()));
            }
            for row in out.data_mut().chunks_exact_mut(out_f) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    /// Per-channel `x * scale[c] + shift[c]` for `(N, C, ...)` inputs.
    pub fn affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(shape_err!("affine input must have a channel axis, got {:?}", x.dims()));
        }
        let c = x.dims()[1];
        let (s, b) = (self.value(scale), self.value(shift));
        if s.len() != c || b.len() != c {
            return Err(shape_err!("affine parameters have {}/{} entries for {c} channels", s.len(), b.len()));
        }
        let inner: usize = x.dims()[2..].iter().product();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let (sv, bv) = (s.data()[i % c], b.data()[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * sv + bv);
        }
        let rg = self.rg(&[input, scale, shift]);
        Ok(self.push(out, Op::Affine { input, scale, shift }, rg))
    }

    /// Channel concatenation of NCHW tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of no tensors".into()))?;
        let (n, _, h, w) = self.value(first).nchw()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).nchw()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!("concat of {:?} and {:?}", self.value(first).dims(), self.value(p).dims()));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(n * total * h * w);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                let per = v.dims()[1] * h * w;
                data.extend_from_slice(&v.data()[i * per..(i + 1) * per]);
            }
        }
        let out = Tensor::from_vec(&[n, total, h, w], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Softmax of a flat vector.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = Tensor::from_vec(self.value(x).dims(), softmax(self.value(x).data())).expect("same dims");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// `Σ weights[idx] · term` over `(term, idx)` pairs of equal shape.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize)], weights: Var) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::InvalidArgument("weighted sum of no terms".into()))?;
        let w = self.value(weights).data().to_vec();
        let mut out = Tensor::zeros(self.value(first).dims());
        for &(t, i) in terms {
            let wi = *w.get(i).ok_or_else(|| shape_err!("weight index {i} out of range {}", w.len()))?;
            out.axpy(wi, self.value(t))?;
        }
        let mut deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::WeightedSum { terms: terms.to_vec(), weights }, rg))
    }

    /// Mean softmax cross-entropy of `(N, classes)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, c) = match *x.dims() {
            [n, c] => (n, c),
            _ => return Err(shape_err!("logits must be (N, classes), got {:?}", x.dims())),
        };
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} logit rows", labels.len()));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = T::zero();
        for (row, &y) in x.data().chunks_exact(c).zip(labels) {
            if y >= c {
                return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
            }
            let p = softmax(row);
            loss -= p[y].max(T::min_positive_value()).ln();
            probs.extend(p);
        }
        let out = Tensor::scalar(loss / T::of(n as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Scalar `<x, other>` for a fixed tensor.
    pub fn dot_const(&mut self, x: Var, other: Tensor<T>) -> Result<Var> {
        if self.value(x).dims() != other.dims() {
            return Err(shape_err!("dot of {:?} with {:?}", self.value(x).dims(), other.dims()));
        }
        let out = Tensor::scalar(self.value(x).dot(&other));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::DotConst { input: x, other }, rg))
    }

    /// Back-propagates from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).dims(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                params.push((id, Var(i)));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(T::one(), &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { input, weight, bias, params } => {
                let need_input = self.nodes[input.0].requires_grad;
                let cg = conv::conv2d_backward(g, self.value(*input), self.value(*weight), params, need_input)?;
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, gi)?;
                }
                self.accumulate(grads, *weight, cg.weight)?;
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias)?;
                }
            }
            Op::Reparameterize { weight, transform } => {
                let k2 = transform.dim();
                let mut gw = Tensor::zeros(g.dims());
                for (src, dst) in g.data().chunks_exact(k2).zip(gw.data_mut().chunks_exact_mut(k2)) {
                    transform.apply_into(src, dst);
                }
                self.accumulate(grads, *weight, gw)?;
            }
            Op::Sum(terms) => {
                for &t in terms {
                    self.accumulate(grads, t, g.clone())?;
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * *f))?,
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (d, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::MaxPool { input, argmax } => {
                let gx = pool::max_pool2d_backward(g, self.value(*input).dims(), argmax);
                self.accumulate(grads, *input, gx)?;
            }
            Op::AvgPool { input, params } => {
                let gx = pool::avg_pool2d_backward(g, self.value(*input).dims(), params)?;
                self.accumulate(grads, *input, gx)?;
            }
            Op::GlobalAvgPool(x) => {
                let dims = self.value(*x).dims();
                let hw = dims[2] * dims[3];
                let inv = T::of(1.0 / hw as f64);
                let data = g.data().iter().flat_map(|&v| std::iter::repeat(v * inv).take(hw)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(dims, data)?)?;
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (n, f) = (x.dims()[0], x.dims()[1]);
                let o = w.dims()[0];
                if self.nodes[input.0].requires_grad {
                    let mut gx = Tensor::zeros(x.dims());
                    T::gemm(n, o, f, T::one(), g.data(), o as isize, 1, w.data(), f as isize, 1, T::zero(), gx.data_mut(), f as isize, 1);
                    self.accumulate(grads, *input, gx)?;
                }
                let mut gw = Tensor::zeros(w.dims());
                T::gemm(o, n, f, T::one(), g.data(), 1, o as isize, x.data(), f as isize, 1, T::zero(), gw.data_mut(), f as isize, 1);
                self.accumulate(grads, *weight, gw)?;
                if let Some(b) = bias {
                    let mut gb = Tensor::zeros(&[o]);
                    for row in g.data().chunks_exact(o) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Affine { input, scale, shift } => {
                let x = self.value(*input);
                let c = x.dims()[1];
                let inner: usize = x.dims()[2..].iter().product();
                let s = self.value(*scale).data();
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for (i, (gchunk, xchunk)) in gx.data_mut().chunks_exact_mut(inner).zip(x.data().chunks_exact(inner)).enumerate() {
                    let ch = i % c;
                    let mut ds = T::zero();
                    let mut db = T::zero();
                    for (gv, &xv) in gchunk.iter_mut().zip(xchunk) {
                        ds += *gv * xv;
                        db += *gv;
                        *gv *= s[ch];
                    }
                    gs.data_mut()[ch] += ds;
                    gb.data_mut()[ch] += db;
                }
                self.accumulate(grads, *input, gx)?;
                self.accumulate(grads, *scale, gs)?;
                self.accumulate(grads, *shift, gb)?;
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = g.nchw()?;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims()[1];
                    let mut gp = Vec::with_capacity(n * pc * h * w);
                    for i in 0..n {
                        let start = (i * total + offset) * h * w;
                        gp.extend_from_slice(&g.data()[start..start + pc * h * w]);
                    }
                    self.accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], gp)?)?;
                    offset += pc;
                }
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).dims())?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let dot: T = p.iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                let gx = p.iter().zip(g.data()).map(|(&pi, &gi)| pi * (gi - dot)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.dims(), gx)?)?;
            }
            Op::WeightedSum { terms, weights } => {
                let w = self.value(*weights);
                let mut gw = Tensor::zeros(w.dims());
                for &(t, i) in terms {
                    gw.data_mut()[i] += g.dot(self.value(t));
                    if self.nodes[t.0].requires_grad {
                        let wi = w.data()[i];
                        self.accumulate(grads, t, g.map(|v| v * wi))?;
                    }
                }
                self.accumulate(grads, *weights, gw)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).dims()[1];
                let scale = g.data()[0] / T::of(labels.len() as f64);
                let mut gx = probs.clone();
                for (row, &y) in gx.chunks_exact_mut(c).zip(labels) {
                    row[y] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::from_vec(self.value(*logits).dims(), gx)?)?;
            }
            Op::DotConst { input, other } => {
                let s = g.data()[0];
                self.accumulate(grads, *input, other.map(|v| v * s))?;
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter, summed over every leaf that copied it.
    pub fn param_grads(&self) -> BTreeMap<ParamId, Tensor<T>> {
        let mut out: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                match out.get_mut(&id) {
                    Some(acc) => acc.axpy(T::one(), g).expect("same parameter shape"),
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0f64, 2.0, 3.0, -50.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let q = softmax(&[0.0f64; 4]);
        assert!(q.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Weight, Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        let s = tape.sum(&[a, b]).unwrap();
        let l = tape.dot_const(s, Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        let g = tape.backward(l).unwrap().param_grads();
        assert_eq!(g[&id].data(), &[6.0, 8.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[3, 4]));
        let l = tape.cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(x, &[0, 1, 4]).is_err());
    }

    #[test]
    fn inputs_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.relu(x);
        let l = tape.dot_const(y, Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).is_none());
    }
}
