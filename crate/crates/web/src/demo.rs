//! Plain Rust versions of the exported operations.

use orbiconv::experiments::{gen_synthetic, warp_image, SyntheticKind, WarpMode};
use orbiconv::geometry::points_for;
use orbiconv::nn::conv::{conv2d, Conv2dParams};
use orbiconv::transform::reparameterize;
use orbiconv::{Error, KernelShape, Result, Tensor, TransformMatrix};

fn shape(circular: bool) -> KernelShape {
    if circular {
        KernelShape::Circular
    } else {
        KernelShape::Square
    }
}

pub fn sample_points(kernel_size: usize, dilation: usize, circular: bool) -> Result<Vec<f64>> {
    let set = points_for(shape(circular), kernel_size, dilation)?;
    Ok(set.points().iter().zip(set.rings()).flat_map(|(p, &r)| [p.x, p.y, r as f64]).collect())
}

pub fn transform_matrix(kernel_size: usize, dilation: usize) -> Result<Vec<f64>> {
    Ok(TransformMatrix::circular(kernel_size, dilation)?.to_dense().concat())
}

pub fn effective_kernel(kernel_size: usize, weights: &[f64]) -> Result<Vec<f64>> {
    reparameterize(weights, &TransformMatrix::circular(kernel_size, 1)?)
}

/// First sample of a synthetic class.
pub fn pattern(name: &str, size: usize) -> Result<Vec<f32>> {
    let (kind, index) = match name {
        "ring" => (SyntheticKind::RingVsCross, 0),
        "cross" => (SyntheticKind::RingVsCross, 1),
        "hbar" => (SyntheticKind::OrientedBars, 0),
        "vbar" => (SyntheticKind::OrientedBars, 1),
        other => return Err(Error::InvalidArgument(format!("unknown pattern `{other}`"))),
    };
    Ok(gen_synthetic(kind, 1, size, 0)?.image(index).to_vec())
}

/// Unit weights on the outermost ring, re-parameterized onto the grid.
fn outer_ring_kernel(kernel_size: usize, circular: bool) -> Result<Vec<f32>> {
    let set = points_for(shape(circular), kernel_size, 1)?;
    let outer = kernel_size / 2;
    let w: Vec<f32> = set.rings().iter().map(|&r| if r == outer { 1.0 } else { 0.0 }).collect();
    reparameterize(&w, &TransformMatrix::for_shape(shape(circular), kernel_size, 1)?)
}

fn respond(img: &[f32], size: usize, kernel: &[f32], kernel_size: usize) -> Result<Vec<f32>> {
    let input = Tensor::from_vec(&[1, 1, size, size], img.to_vec())?;
    let weight = Tensor::from_vec(&[1, 1, kernel_size, kernel_size], kernel.to_vec())?;
    let p = Conv2dParams { padding: kernel_size / 2, ..Default::default() };
    Ok(conv2d(&input, &weight, None, &p)?.data().to_vec())
}

pub fn rotate_and_convolve(name: &str, size: usize, angle: f64, kernel_size: usize, circular: bool) -> Result<Vec<f32>> {
    let img = warp_image(&pattern(name, size)?, size, size, angle, WarpMode::Rotate)?;
    let response = respond(&img, size, &outer_ring_kernel(kernel_size, circular)?, kernel_size)?;
    Ok([img, response].concat())
}

pub fn response_curve(name: &str, size: usize, kernel_size: usize, circular: bool, steps: usize) -> Result<Vec<f64>> {
    let base = pattern(name, size)?;
    let kernel = outer_ring_kernel(kernel_size, circular)?;
    (0..steps)
        .map(|i| {
            let img = warp_image(&base, size, size, 360.0 * i as f64 / steps as f64, WarpMode::Rotate)?;
            let r = respond(&img, size, &kernel, kernel_size)?;
            Ok(r.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64)
        })
        .collect()
}
