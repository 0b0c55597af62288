//! Max and average pooling over NCHW tensors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    fn out_dims(&self, dims: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = match *dims {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("pooling expects NCHW, got {dims:?}")),
        };
        let ext = |x: usize| {
            let padded = x + 2 * self.padding;
            (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
        };
        match (ext(h), ext(w)) {
            (Some(oh), Some(ow)) => Ok((n, c, h, w, oh, ow)),
            _ => Err(shape_err!("pooling output is empty for {h}x{w} input")),
        }
    }

    /// Input window of output `(oh, ow)`, clipped to the image.
    fn window(&self, oh: usize, ow: usize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let clip = |o: usize, len: usize| {
            let start = (o * self.stride) as isize - self.padding as isize;
            let end = start + self.kernel as isize;
            start.max(0) as usize..(end.min(len as isize)).max(0) as usize
        };
        (clip(oh, h), clip(ow, w))
    }
}

/// Max pooling; padded positions never win. Returns the output and, per
/// output element, the flat input index it was taken from.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w, oh, ow) = p.out_dims(x.dims())?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let (rows, cols) = p.window(i, j, h, w);
                let mut best = T::neg_infinity();
                let mut at = base;
                for r in rows {
                    for q in cols.clone() {
                        let v = data[base + r * w + q];
                        if v > best {
                            best = v;
                            at = base + r * w + q;
                        }
                    }
                }
                out.data_mut()[o] = best;
                argmax.push(at);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_backward<T: Scalar>(grad_out: &Tensor<T>, input_dims: &[usize], argmax: &[usize]) -> Tensor<T> {
    let mut g = Tensor::zeros(input_dims);
    for (&src, &v) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[src] += v;
    }
    g
}

/// Average pooling that divides by the number of in-image elements.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = p.out_dims(x.dims())?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let data = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let (rows, cols) = p.window(i, j, h, w);
                let count = rows.len() * cols.len();
                let mut acc = T::zero();
                for r in rows {
                    for q in cols.clone() {
                        acc += data[base + r * w + q];
                    }
                }
                out.data_mut()[o] = acc / T::of(count as f64);
                o += 1;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward<T: Scalar>(grad_out: &Tensor<T>, input_dims: &[usize], p: &PoolParams) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = p.out_dims(input_dims)?;
    let mut g = Tensor::zeros(input_dims);
    let go = grad_out.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let (rows, cols) = p.window(i, j, h, w);
                let share = go[o] / T::of((rows.len() * cols.len()) as f64);
                for r in rows {
                    for q in cols.clone() {
                        g.data_mut()[base + r * w + q] += share;
                    }
                }
                o += 1;
            }
        }
    }
    Ok(g)
}
