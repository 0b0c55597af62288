//! Output-change identity of circular convolution.
//!
//! For a weight change `ΔW` the squared output change can be computed three
//! ways: directly from two outputs, by convolving `ΔW` over the resampled
//! receptive fields `B⋆I`, or by convolving the re-parameterized change
//! `ΔW⋆B` over `I`. [`verify_delta_identity`] evaluates all three.

use crate::error::{shape_err, Result};
use crate::nn::conv::{self, Conv2dParams};
use crate::tensor::{Scalar, Tensor};
use crate::transform::{reparameterize, TransformMatrix};

/// The three evaluations of `‖ΔO‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaNorms {
    /// From the difference of the two outputs.
    pub direct: f64,
    /// `ΔW` over `B⋆I`.
    pub receptive_field: f64,
    /// `ΔW⋆B` over `I`.
    pub kernel_space: f64,
}

impl DeltaNorms {
    /// Largest pairwise relative difference, `0` when all three vanish.
    pub fn max_relative_gap(&self) -> f64 {
        let v = [self.direct, self.receptive_field, self.kernel_space];
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut gap = 0.0f64;
        for i in 0..3 {
            for j in i + 1..3 {
                gap = gap.max((v[i] - v[j]).abs() / scale);
            }
        }
        gap
    }
}

/// `B`-resampled receptive field of every output pixel of a stride-1 "same"
/// convolution over a single `H×W` plane, zero padded. Row `j` holds the `K²`
/// circular samples around pixel `j`.
pub fn resampled_patches<T: Scalar>(image: &[T], h: usize, w: usize, transform: &TransformMatrix) -> Vec<Vec<T>> {
    let k = transform.kernel_size();
    let m = (k / 2) as isize;
    let d = transform.dilation() as isize;
    let mut out = Vec::with_capacity(h * w);
    let mut patch = vec![T::zero(); k * k];
    let mut resampled = vec![T::zero(); k * k];
    for r in 0..h as isize {
        for c in 0..w as isize {
            for kr in 0..k as isize {
                for kc in 0..k as isize {
                    let (ir, ic) = (r + (kr - m) * d, c + (kc - m) * d);
                    patch[(kr * k as isize + kc) as usize] = if ir >= 0 && ic >= 0 && ir < h as isize && ic < w as isize {
                        image[ir as usize * w + ic as usize]
                    } else {
                        T::zero()
                    };
                }
            }
            transform.apply_into(&patch, &mut resampled);
            out.push(resampled.clone());
        }
    }
    out
}

fn same_conv<T: Scalar>(image: &Tensor<T>, kernel: &[T], k: usize, dilation: usize) -> Result<Tensor<T>> {
    let w = Tensor::from_vec(&[1, 1, k, k], kernel.to_vec())?;
    let p = Conv2dParams { stride: 1, padding: dilation * (k / 2), dilation, groups: 1 };
    conv::conv2d(image, &w, None, &p)
}

fn sq_norm<T: Scalar>(v: impl IntoIterator<Item = T>) -> f64 {
    v.into_iter().map(|x| x.f64() * x.f64()).sum()
}

/// Evaluates `‖ΔO‖²` for `ΔW = w_after − w_before` on a single-channel image
/// `(1, 1, H, W)` under "same" zero padding.
pub fn verify_delta_identity<T: Scalar>(
    image: &Tensor<T>,
    w_before: &[T],
    w_after: &[T],
    transform: &TransformMatrix,
) -> Result<DeltaNorms> {
    let (n, c, h, w) = image.nchw()?;
    if n != 1 || c != 1 {
        return Err(shape_err!("identity check needs a single-channel single image, got {:?}", image.dims()));
    }
    let k = transform.kernel_size();
    let d = transform.dilation();
    if w_before.len() != k * k || w_after.len() != k * k {
        return Err(shape_err!("kernels have {}/{} entries, transform expects {}", w_before.len(), w_after.len(), k * k));
    }

    let o_before = same_conv(image, &reparameterize(w_before, transform)?, k, d)?;
    let o_after = same_conv(image, &reparameterize(w_after, transform)?, k, d)?;
    let direct = sq_norm(o_after.data().iter().zip(o_before.data()).map(|(&a, &b)| a - b));

    let dw: Vec<T> = w_after.iter().zip(w_before).map(|(&a, &b)| a - b).collect();
    let patches = resampled_patches(image.data(), h, w, transform);
    let receptive_field = sq_norm(patches.iter().map(|p| p.iter().zip(&dw).map(|(&x, &y)| x * y).sum::<T>()));

    let kernel_space = sq_norm(same_conv(image, &reparameterize(&dw, transform)?, k, d)?.into_data());

    Ok(DeltaNorms { direct, receptive_field, kernel_space })
}
