//! im2col convolution kernels (forward and backward) over NCHW tensors.
//!
//! Weight slot `(kr, kc)` of a `K×K` kernel reads input pixel
//! `(oh·stride − pad + kr·dil, ow·stride − pad + kc·dil)`. This is the single
//! place where kernel geometry (y-up offsets) meets image indexing (row down).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dParams {
    /// Output extent along one axis, `None` when it would be empty.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

/// Validated shapes of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub cin_g: usize,
    pub cout_g: usize,
}

impl ConvShape {
    pub fn new(input: &[usize], weight: &[usize], p: &Conv2dParams) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv input must be NCHW, got {input:?}")),
        };
        let (cout, cin_g, kh, kw) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err!("conv weight must be (Cout, Cin, K, K), got {weight:?}")),
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernels must be odd and square, got {kh}x{kw}")));
        }
        if p.groups == 0 || cin % p.groups != 0 || cout % p.groups != 0 {
            return Err(shape_err!("{cin} input / {cout} output channels not divisible into {} groups", p.groups));
        }
        if cin / p.groups != cin_g {
            return Err(shape_err!(
                "input has {cin} channels but weight expects {} ({} groups)",
                cin_g * p.groups,
                p.groups
            ));
        }
        let oh = p.out_extent(h, kh).ok_or_else(|| shape_err!("convolution output is empty for {h}x{w} input"))?;
        let ow = p.out_extent(w, kh).ok_or_else(|| shape_err!("convolution output is empty for {h}x{w} input"))?;
        Ok(Self { n, cin, h, w, cout, k: kh, oh, ow, cin_g, cout_g: cout / p.groups })
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds the channels `[c0, c0 + shape.cin_g)` of one image into columns.
fn im2col<T: Scalar>(image: &[T], c0: usize, s: &ConvShape, p: &Conv2dParams, cols: &mut [T]) {
    let hw = s.col_cols();
    for c in 0..s.cin_g {
        let plane = &image[(c0 + c) * s.h * s.w..(c0 + c + 1) * s.h * s.w];
        for kr in 0..s.k {
            for kc in 0..s.k {
                let row = (c * s.k + kr) * s.k + kc;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..s.oh {
                    let ih = (oh * p.stride + kr * p.dilation) as isize - p.padding as isize;
                    let out = &mut dst[oh * s.ow..(oh + 1) * s.ow];
                    if ih < 0 || ih >= s.h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    for (ow, v) in out.iter_mut().enumerate() {
                        let iw = (ow * p.stride + kc * p.dilation) as isize - p.padding as isize;
                        *v = if iw < 0 || iw >= s.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Scatters columns back into an image gradient (adjoint of [`im2col`]).
fn col2im<T: Scalar>(cols: &[T], c0: usize, s: &ConvShape, p: &Conv2dParams, image: &mut [T]) {
    let hw = s.col_cols();
    for c in 0..s.cin_g {
        let plane = &mut image[(c0 + c) * s.h * s.w..(c0 + c + 1) * s.h * s.w];
        for kr in 0..s.k {
            for kc in 0..s.k {
                let row = (c * s.k + kr) * s.k + kc;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..s.oh {
                    let ih = (oh * p.stride + kr * p.dilation) as isize - p.padding as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    for ow in 0..s.ow {
                        let iw = (ow * p.stride + kc * p.dilation) as isize - p.padding as isize;
                        if iw >= 0 && iw < s.w as isize {
                            dst[iw as usize] += src[oh * s.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` of row `oh` whose tap `(kr, kc)` lands inside the
/// input, with the input row and the input column of output column 0.
fn tap_span(s: &ConvShape, p: &Conv2dParams, oh: usize, kr: usize, kc: usize) -> Option<(usize, usize, usize, isize)> {
    let ih = (oh * p.stride + kr * p.dilation) as isize - p.padding as isize;
    if ih < 0 || ih >= s.h as isize {
        return None;
    }
    let iw0 = (kc * p.dilation) as isize - p.padding as isize;
    let st = p.stride as isize;
    let lo = if iw0 >= 0 { 0 } else { ((-iw0 + st - 1) / st) as usize };
    let last = s.w as isize - 1 - iw0;
    if last < 0 {
        return None;
    }
    let hi = ((last / st) as usize + 1).min(s.ow);
    (lo < hi).then_some((ih as usize, lo, hi, iw0))
}

/// Valid `(tap, output row, input row, lo, hi, input column of lo)` spans.
type Span = (usize, usize, usize, usize, usize, usize);

fn tap_spans(s: &ConvShape, p: &Conv2dParams) -> Vec<Span> {
    let mut out = Vec::with_capacity(s.k * s.k * s.oh);
    for kr in 0..s.k {
        for kc in 0..s.k {
            for oh in 0..s.oh {
                if let Some((ih, lo, hi, iw0)) = tap_span(s, p, oh, kr, kc) {
                    out.push((kr * s.k + kc, oh, ih, lo, hi, (lo as isize * p.stride as isize + iw0) as usize));
                }
            }
        }
    }
    out
}

/// Direct depthwise convolution, one input channel per output channel.
fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], s: &ConvShape, p: &Conv2dParams, out: &mut [T]) {
    let (hw_in, hw_out, kk) = (s.h * s.w, s.oh * s.ow, s.k * s.k);
    let spans = tap_spans(s, p);
    let st = p.stride;
    for n in 0..s.n {
        for c in 0..s.cin {
            let plane = &x[(n * s.cin + c) * hw_in..][..hw_in];
            let dst = &mut out[(n * s.cin + c) * hw_out..][..hw_out];
            let wc = &w[c * kk..][..kk];
            for &(t, oh, ih, lo, hi, iw) in &spans {
                let wv = wc[t];
                let row = &mut dst[oh * s.ow + lo..oh * s.ow + hi];
                let src = &plane[ih * s.w + iw..];
                if st == 1 {
                    for (o, &v) in row.iter_mut().zip(src) {
                        *o += wv * v;
                    }
                } else {
                    for (o, &v) in row.iter_mut().zip(src.iter().step_by(st)) {
                        *o += wv * v;
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    go: &[T],
    x: &[T],
    w: &[T],
    s: &ConvShape,
    p: &Conv2dParams,
    gw: &mut [T],
    mut gin: Option<&mut [T]>,
) {
    let (hw_in, hw_out, kk) = (s.h * s.w, s.oh * s.ow, s.k * s.k);
    let spans = tap_spans(s, p);
    let st = p.stride;
    for n in 0..s.n {
        for c in 0..s.cin {
            let plane = &x[(n * s.cin + c) * hw_in..][..hw_in];
            let g = &go[(n * s.cin + c) * hw_out..][..hw_out];
            let gwc = &mut gw[c * kk..][..kk];
            let wc = &w[c * kk..][..kk];
            for &(t, oh, ih, lo, hi, iw) in &spans {
                let grow = &g[oh * s.ow + lo..oh * s.ow + hi];
                let src = &plane[ih * s.w + iw..];
                let acc: T = if st == 1 {
                    grow.iter().zip(src).map(|(&a, &b)| a * b).sum()
                } else {
                    grow.iter().zip(src.iter().step_by(st)).map(|(&a, &b)| a * b).sum()
                };
                gwc[t] += acc;
                if let Some(gi) = gin.as_deref_mut() {
                    let wv = wc[t];
                    let dst = &mut gi[(n * s.cin + c) * hw_in + ih * s.w + iw..];
                    if st == 1 {
                        for (d, &v) in dst.iter_mut().zip(grow) {
                            *d += wv * v;
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().step_by(st).zip(grow) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

fn is_depthwise(s: &ConvShape) -> bool {
    s.cin_g == 1 && s.cout_g == 1 && s.cin > 1
}

/// Standard (cross-correlation) convolution with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: &Conv2dParams,
) -> Result<Tensor<T>> {
    let s = ConvShape::new(input.dims(), weight.dims(), p)?;
    if let Some(b) = bias {
        if b.len() != s.cout {
            return Err(shape_err!("bias has {} entries for {} output channels", b.len(), s.cout));
        }
    }
    let (rows, hw) = (s.col_rows(), s.col_cols());
    let mut out = Tensor::zeros(&[s.n, s.cout, s.oh, s.ow]);
    if is_depthwise(&s) {
        depthwise_forward(input.data(), weight.data(), &s, p, out.data_mut());
        if let Some(b) = bias {
            for (plane, &bv) in out.data_mut().chunks_exact_mut(hw).zip(b.data().iter().cycle()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        return Ok(out);
    }
    let mut cols = vec![T::zero(); rows * hw];
    let w = weight.data();
    let x = input.data();
    let out_data = out.data_mut();
    for n in 0..s.n {
        let image = &x[n * s.cin * s.h * s.w..(n + 1) * s.cin * s.h * s.w];
        for g in 0..p.groups {
            im2col(image, g * s.cin_g, &s, p, &mut cols);
            let wg = &w[g * s.cout_g * rows..(g + 1) * s.cout_g * rows];
            let o0 = (n * s.cout + g * s.cout_g) * hw;
            let og = &mut out_data[o0..o0 + s.cout_g * hw];
            T::gemm(s.cout_g, rows, hw, T::one(), wg, rows as isize, 1, &cols, hw as isize, 1, T::zero(), og, hw as isize, 1);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                let o0 = (n * s.cout + co) * hw;
                out_data[o0..o0 + hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`].
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    p: &Conv2dParams,
    need_input: bool,
) -> Result<Conv2dGrads<T>> {
    let s = ConvShape::new(input.dims(), weight.dims(), p)?;
    if grad_out.dims() != [s.n, s.cout, s.oh, s.ow] {
        return Err(shape_err!("output gradient {:?} does not match {:?}", grad_out.dims(), [s.n, s.cout, s.oh, s.ow]));
    }
    let (rows, hw) = (s.col_rows(), s.col_cols());
    let mut gw = Tensor::zeros(weight.dims());
    let mut gb = Tensor::zeros(&[s.cout]);
    let mut gin = need_input.then(|| Tensor::zeros(input.dims()));
    if is_depthwise(&s) {
        depthwise_backward(grad_out.data(), input.data(), weight.data(), &s, p, gw.data_mut(), gin.as_mut().map(|t| t.data_mut()));
        for (plane, co) in grad_out.data().chunks_exact(hw).zip((0..s.cout).cycle()) {
            gb.data_mut()[co] += plane.iter().copied().sum();
        }
        return Ok(Conv2dGrads { input: gin, weight: gw, bias: gb });
    }
    let mut cols = vec![T::zero(); rows * hw];
    let mut gcols = vec![T::zero(); rows * hw];
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    for n in 0..s.n {
        let image = &x[n * s.cin * s.h * s.w..(n + 1) * s.cin * s.h * s.w];
        for g in 0..p.groups {
            let o0 = (n * s.cout + g * s.cout_g) * hw;
            let gog = &go[o0..o0 + s.cout_g * hw];
            im2col(image, g * s.cin_g, &s, p, &mut cols);
            let gwg = &mut gw.data_mut()[g * s.cout_g * rows..(g + 1) * s.cout_g * rows];
            // gW += gout · colsᵀ
            T::gemm(s.cout_g, hw, rows, T::one(), gog, hw as isize, 1, &cols, 1, hw as isize, T::one(), gwg, rows as isize, 1);
            if let Some(gin) = gin.as_mut() {
                let wg = &w[g * s.cout_g * rows..(g + 1) * s.cout_g * rows];
                // gcols = Wᵀ · gout
                T::gemm(rows, s.cout_g, hw, T::one(), wg, 1, rows as isize, gog, hw as isize, 1, T::zero(), &mut gcols, hw as isize, 1);
                let gimg = &mut gin.data_mut()[n * s.cin * s.h * s.w..(n + 1) * s.cin * s.h * s.w];
                col2im(&gcols, g * s.cin_g, &s, p, gimg);
            }
        }
        for co in 0..s.cout {
            let o0 = (n * s.cout + co) * hw;
            gb.data_mut()[co] += go[o0..o0 + hw].iter().copied().sum();
        }
    }
    Ok(Conv2dGrads { input: gin, weight: gw, bias: gb })
}
