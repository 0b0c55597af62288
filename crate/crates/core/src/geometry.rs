//! Receptive-field sample point sets for square and circular kernels.
//!
//! Offsets use a y-up convention: `(0, 1)` is the top-middle slot of a 3×3
//! kernel. Points are always stored in the canonical kernel-weight order,
//! row-major over the square grid starting at the top-left slot. For circular
//! sets, slot `i` holds the circular sample paired with square slot `i`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when comparing sample coordinates.
pub const COORD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
}

impl SamplePoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotates the point counterclockwise about the origin.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn approx_eq(&self, other: &SamplePoint, eps: f64) -> bool {
        (self.x - other.x).abs() <= eps && (self.y - other.y).abs() <= eps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelShape {
    Square,
    Circular,
}

impl std::str::FromStr for KernelShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "square" => Ok(KernelShape::Square),
            "circular" | "circle" => Ok(KernelShape::Circular),
            other => Err(Error::InvalidArgument(format!("unknown kernel shape `{other}`"))),
        }
    }
}

/// The `K²` offsets a kernel reads around its center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePointSet {
    kernel_size: usize,
    dilation: usize,
    mode: KernelShape,
    points: Vec<SamplePoint>,
    rings: Vec<usize>,
}

impl SamplePointSet {
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn mode(&self) -> KernelShape {
        self.mode
    }

    pub fn points(&self) -> &[SamplePoint] {
        &self.points
    }

    /// Ring (Chebyshev shell) index of every slot.
    pub fn rings(&self) -> &[usize] {
        &self.rings
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Half-width `(K-1)/2` of the kernel in grid steps.
    pub fn half_width(&self) -> usize {
        self.kernel_size / 2
    }

    /// Points of ring `k`, in slot order.
    pub fn ring_points(&self, k: usize) -> Vec<SamplePoint> {
        self.points
            .iter()
            .zip(&self.rings)
            .filter(|(_, &r)| r == k)
            .map(|(p, _)| *p)
            .collect()
    }
}

fn check_size(kernel_size: usize, dilation: usize) -> Result<()> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and positive, got {kernel_size}"
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be at least 1".into()));
    }
    Ok(())
}

/// Grid offset of slot `index` in a kernel of half-width `m`, in grid steps.
pub(crate) fn slot_offset(index: usize, kernel_size: usize) -> (i64, i64) {
    let m = (kernel_size / 2) as i64;
    let row = (index / kernel_size) as i64;
    let col = (index % kernel_size) as i64;
    (col - m, m - row)
}

/// Angle in `[0, 2π)` measured counterclockwise from the +x axis.
fn angle_of(x: f64, y: f64) -> f64 {
    let a = y.atan2(x);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Unit vector at `j` steps of `2π/n`, exact on the axes and diagonals.
fn ring_direction(j: usize, n: usize) -> (f64, f64) {
    debug_assert!(n % 8 == 0);
    let eighth = n / 8;
    if j % eighth == 0 {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        return match j / eighth {
            0 => (1.0, 0.0),
            1 => (d, d),
            2 => (0.0, 1.0),
            3 => (-d, d),
            4 => (-1.0, 0.0),
            5 => (-d, -d),
            6 => (0.0, -1.0),
            _ => (d, -d),
        };
    }
    let theta = 2.0 * PI * j as f64 / n as f64;
    (theta.cos(), theta.sin())
}

/// Square grid offsets `{-d·m, …, d·m}²` in row-major order, top-left first.
pub fn square_points(kernel_size: usize, dilation: usize) -> Result<SamplePointSet> {
    check_size(kernel_size, dilation)?;
    let d = dilation as f64;
    let (points, rings) = (0..kernel_size * kernel_size)
        .map(|i| {
            let (gx, gy) = slot_offset(i, kernel_size);
            let ring = gx.unsigned_abs().max(gy.unsigned_abs()) as usize;
            (SamplePoint::new(gx as f64 * d, gy as f64 * d), ring)
        })
        .unzip();
    Ok(SamplePointSet { kernel_size, dilation, mode: KernelShape::Square, points, rings })
}

/// Concentric-ring offsets: the center plus `8k` evenly spaced points at radius
/// `d·k` for each ring `k = 1..=(K-1)/2`, with one point of every ring on the
/// +x axis.
///
/// Each ring is paired with the square shell at Chebyshev distance `k`: both are
/// sorted counterclockwise from +x and matched by rank, so axis slots keep their
/// grid position and diagonal slots move inward.
pub fn circular_points(kernel_size: usize, dilation: usize) -> Result<SamplePointSet> {
    let square = square_points(kernel_size, dilation)?;
    let m = kernel_size / 2;
    let d = dilation as f64;
    let mut points = vec![SamplePoint::new(0.0, 0.0); square.len()];

    for k in 1..=m {
        let mut shell: Vec<(f64, usize)> = square
            .rings
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == k)
            .map(|(i, _)| {
                let p = square.points[i];
                (angle_of(p.x, p.y), i)
            })
            .collect();
        shell.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = 8 * k;
        debug_assert_eq!(shell.len(), n);
        let radius = d * k as f64;
        for (j, &(_, slot)) in shell.iter().enumerate() {
            let (c, s) = ring_direction(j, n);
            points[slot] = SamplePoint::new(radius * c, radius * s);
        }
    }

    Ok(SamplePointSet {
        kernel_size,
        dilation,
        mode: KernelShape::Circular,
        points,
        rings: square.rings,
    })
}

/// Sample set of the given shape.
pub fn points_for(shape: KernelShape, kernel_size: usize, dilation: usize) -> Result<SamplePointSet> {
    match shape {
        KernelShape::Square => square_points(kernel_size, dilation),
        KernelShape::Circular => circular_points(kernel_size, dilation),
    }
}

/// Per-slot offsets `circular[i] - square[i]`.
pub fn offsets(square: &SamplePointSet, circular: &SamplePointSet) -> Result<Vec<(f64, f64)>> {
    if square.kernel_size != circular.kernel_size || square.dilation != circular.dilation {
        return Err(Error::InvalidArgument(format!(
            "offset sets disagree: K={}/d={} vs K={}/d={}",
            square.kernel_size, square.dilation, circular.kernel_size, circular.dilation
        )));
    }
    Ok(square
        .points
        .iter()
        .zip(&circular.points)
        .map(|(s, c)| (c.x - s.x, c.y - s.y))
        .collect())
}
