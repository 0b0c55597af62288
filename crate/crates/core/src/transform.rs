//! The fixed bilinear transformation matrix `B` of a circular kernel.
//!
//! Row `r` of `B` holds the bilinear weights that reconstruct circular sample
//! `r` from the `K²` square grid samples, so `B · patch` resamples a square
//! patch onto the circular receptive field. The same matrix acting on the
//! weights, `Wᵀ B`, produces an equivalent square kernel; that is the path the
//! convolution layers use, since it runs once per forward pass instead of once
//! per output pixel.
//!
//! For dilated kernels the interpolation is done on the dilated lattice, i.e.
//! with coordinates divided by the dilation, so `B` depends on `K` only.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{self, KernelShape, SamplePoint, SamplePointSet, COORD_EPS};
use crate::tensor::Scalar;

/// One-dimensional hat function `max(0, 1 - |a - b|)`.
pub fn hat(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

/// Bilinear interpolation weight of grid point `s` for fractional point `r`.
pub fn bilinear_weight(s: SamplePoint, r: SamplePoint) -> f64 {
    hat(s.x, r.x) * hat(s.y, r.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformMode {
    Identity,
    Circular,
}

/// Sparse `K²×K²` matrix, rows are circular sample slots and columns are
/// square grid slots. Stored row-compressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformMatrix {
    kernel_size: usize,
    dilation: usize,
    mode: TransformMode,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl TransformMatrix {
    pub fn identity(kernel_size: usize, dilation: usize) -> Result<Self> {
        let n = geometry::square_points(kernel_size, dilation)?.len();
        Ok(Self {
            kernel_size,
            dilation,
            mode: TransformMode::Identity,
            row_start: (0..=n).collect(),
            cols: (0..n).collect(),
            values: vec![1.0; n],
        })
    }

    /// Shorthand for `build_transform(&circular_points(k, d))`.
    pub fn circular(kernel_size: usize, dilation: usize) -> Result<Self> {
        build_transform(&geometry::circular_points(kernel_size, dilation)?)
    }

    /// Matrix for the given kernel shape: identity for square kernels.
    pub fn for_shape(shape: KernelShape, kernel_size: usize, dilation: usize) -> Result<Self> {
        match shape {
            KernelShape::Square => Self::identity(kernel_size, dilation),
            KernelShape::Circular => Self::circular(kernel_size, dilation),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn mode(&self) -> TransformMode {
        self.mode
    }

    /// Number of rows (and columns), `K²`.
    pub fn dim(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn is_identity(&self) -> bool {
        self.mode == TransformMode::Identity
    }

    /// Nonzero `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[r]..self.row_start[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(col, _)| col == c).map_or(0.0, |(_, v)| v)
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n)
            .map(|r| {
                let mut row = vec![0.0; n];
                for (c, v) in self.row(r) {
                    row[c] = v;
                }
                row
            })
            .collect()
    }

    /// Whether row `r` is a standard basis row (a single exact 1).
    pub fn is_basis_row(&self, r: usize) -> bool {
        let mut it = self.row(r);
        matches!((it.next(), it.next()), (Some((_, v)), None) if v == 1.0)
    }

    pub fn basis_row_count(&self) -> usize {
        (0..self.dim()).filter(|&r| self.is_basis_row(r)).count()
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.dim() {
            return Err(shape_err!("{what} has length {len}, transform expects {}", self.dim()));
        }
        Ok(())
    }

    /// `y = B x`.
    pub fn apply<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_len(x.len(), "vector")?;
        let mut y = vec![T::zero(); x.len()];
        self.apply_into(x, &mut y);
        Ok(y)
    }

    /// `y = B x` without length checks on the hot path.
    pub(crate) fn apply_into<T: Scalar>(&self, x: &[T], y: &mut [T]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.row(r).map(|(c, v)| T::of(v) * x[c]).sum();
        }
    }

    /// `y = Bᵀ x`.
    pub fn apply_transpose<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_len(x.len(), "vector")?;
        let mut y = vec![T::zero(); x.len()];
        self.apply_transpose_into(x, &mut y);
        Ok(y)
    }

    pub(crate) fn apply_transpose_into<T: Scalar>(&self, x: &[T], y: &mut [T]) {
        y.iter_mut().for_each(|v| *v = T::zero());
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                y[c] += T::of(v) * xr;
            }
        }
    }
}

/// Builds `B` for a circular sample set. Every circular point must have its
/// four bilinear neighbors inside the `K×K` grid.
pub fn build_transform(geometry: &SamplePointSet) -> Result<TransformMatrix> {
    if geometry.mode() != KernelShape::Circular {
        return Err(Error::InvalidArgument("transform needs a circular sample set".into()));
    }
    let k = geometry.kernel_size();
    let d = geometry.dilation() as f64;
    let m = geometry.half_width() as f64;
    let grid = geometry::square_points(k, 1)?;

    let mut row_start = vec![0];
    let mut cols = Vec::new();
    let mut values = Vec::new();
    for (i, p) in geometry.points().iter().enumerate() {
        let r = SamplePoint::new(p.x / d, p.y / d);
        let inside = |v: f64| v.floor() >= -m - COORD_EPS && v.ceil() <= m + COORD_EPS;
        if !(inside(r.x) && inside(r.y)) {
            return Err(Error::Construction(format!(
                "circular point {i} at ({}, {}) has bilinear support outside the {k}x{k} grid",
                p.x, p.y
            )));
        }
        for (c, s) in grid.points().iter().enumerate() {
            let w = bilinear_weight(*s, r);
            if w > 0.0 {
                cols.push(c);
                values.push(w);
            }
        }
        row_start.push(cols.len());
    }
    Ok(TransformMatrix {
        kernel_size: k,
        dilation: geometry.dilation(),
        mode: TransformMode::Circular,
        row_start,
        cols,
        values,
    })
}

/// Re-parameterized kernel `Wᵀ B` of a flattened `K²` kernel.
pub fn reparameterize<T: Scalar>(weights: &[T], transform: &TransformMatrix) -> Result<Vec<T>> {
    if transform.is_identity() {
        transform.check_len(weights.len(), "kernel")?;
        return Ok(weights.to_vec());
    }
    transform.apply_transpose(weights)
}

/// Resamples a row-major `K×K` patch at the circular points: `B · patch`.
pub fn resample_patch<T: Scalar>(patch: &[T], transform: &TransformMatrix) -> Result<Vec<T>> {
    transform.apply(patch)
}

/// Maps a gradient with respect to the effective kernel back to the raw
/// weights: `B · grad`, the adjoint of [`reparameterize`].
pub fn transform_gradient_pushforward<T: Scalar>(
    grad_wrt_effective_kernel: &[T],
    transform: &TransformMatrix,
) -> Result<Vec<T>> {
    if transform.is_identity() {
        transform.check_len(grad_wrt_effective_kernel.len(), "gradient")?;
        return Ok(grad_wrt_effective_kernel.to_vec());
    }
    transform.apply(grad_wrt_effective_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::circular_points;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

    /// Area weights of the four neighbors of a fractional point, computed
    /// from the rectangle decomposition rather than the hat function.
    fn area_weights(x: f64, y: f64) -> Vec<((i64, i64), f64)> {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        vec![
            ((x0 as i64, y0 as i64), (1.0 - fx) * (1.0 - fy)),
            ((x0 as i64 + 1, y0 as i64), fx * (1.0 - fy)),
            ((x0 as i64, y0 as i64 + 1), (1.0 - fx) * fy),
            ((x0 as i64 + 1, y0 as i64 + 1), fx * fy),
        ]
    }

    fn col_of(gx: i64, gy: i64, k: usize) -> usize {
        let m = (k / 2) as i64;
        ((m - gy) * k as i64 + (gx + m)) as usize
    }

    #[test]
    fn bilinear_weight_examples() {
        let w = bilinear_weight(SamplePoint::new(1.0, 1.0), SamplePoint::new(H, H));
        assert!((w - 0.5).abs() < 1e-12);
        assert_eq!(bilinear_weight(SamplePoint::new(0.0, 1.0), SamplePoint::new(0.0, 1.0)), 1.0);
        assert_eq!(bilinear_weight(SamplePoint::new(-1.0, -1.0), SamplePoint::new(0.5, 0.5)), 0.0);
    }

    #[test]
    fn diagonal_row_of_3x3() {
        let b = TransformMatrix::circular(3, 1).unwrap();
        // slot 2 is the top-right diagonal (√2/2, √2/2)
        let expected = [((0, 0), 0.08579), ((1, 0), 0.20711), ((0, 1), 0.20711), ((1, 1), 0.5)];
        let row: Vec<_> = b.row(2).collect();
        assert_eq!(row.len(), 4);
        for ((gx, gy), v) in expected {
            assert!((b.get(2, col_of(gx, gy, 3)) - v).abs() < 1e-5);
        }
        let oracle = area_weights(H, H);
        for ((gx, gy), v) in oracle {
            assert!((b.get(2, col_of(gx, gy, 3)) - v).abs() < 1e-15);
        }
        assert!((row.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn axis_rows_are_basis_rows() {
        let b = TransformMatrix::circular(3, 1).unwrap();
        assert!(b.is_basis_row(1));
        assert_eq!(b.row(1).collect::<Vec<_>>(), vec![(1, 1.0)]);
        assert_eq!(b.basis_row_count(), 5);
        assert_eq!(TransformMatrix::circular(1, 1).unwrap().to_dense(), vec![vec![1.0]]);
    }

    #[test]
    fn rows_match_area_oracle_for_all_sizes() {
        for k in [3usize, 5, 7, 9] {
            let b = TransformMatrix::circular(k, 1).unwrap();
            let pts = circular_points(k, 1).unwrap();
            for (r, p) in pts.points().iter().enumerate() {
                let mut oracle = vec![0.0; k * k];
                for ((gx, gy), v) in area_weights(p.x, p.y) {
                    if v > 0.0 {
                        oracle[col_of(gx, gy, k)] += v;
                    }
                }
                for (c, &v) in oracle.iter().enumerate() {
                    assert!((b.get(r, c) - v).abs() < 1e-12, "K={k} row {r} col {c}");
                }
            }
        }
    }

    #[test]
    fn dilation_does_not_change_coefficients() {
        for k in [3usize, 5, 7] {
            let a = TransformMatrix::circular(k, 1).unwrap();
            let b = TransformMatrix::circular(k, 2).unwrap();
            assert_eq!(a.to_dense(), b.to_dense());
        }
    }

    #[test]
    fn rejects_square_geometry() {
        let s = geometry::square_points(3, 1).unwrap();
        assert!(build_transform(&s).is_err());
    }

    #[test]
    fn identity_reparameterization_is_bitwise_noop() {
        let b = TransformMatrix::identity(3, 1).unwrap();
        let w: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        assert_eq!(reparameterize(&w, &b).unwrap(), w);
        assert_eq!(transform_gradient_pushforward(&w, &b).unwrap(), w);
        assert!(reparameterize(&w[..8], &b).is_err());
    }

    #[test]
    fn center_impulse_is_preserved() {
        let b = TransformMatrix::circular(5, 1).unwrap();
        let mut w = vec![0.0f64; 25];
        w[12] = 1.0;
        assert_eq!(reparameterize(&w, &b).unwrap(), w);
        let corner = (1.0 - std::f64::consts::FRAC_1_SQRT_2).powi(2);
        let r = resample_patch(&w, &b).unwrap();
        for (i, v) in r.iter().enumerate() {
            let want = match i {
                12 => 1.0,
                6 | 8 | 16 | 18 => corner,
                _ => 0.0,
            };
            assert!((v - want).abs() < 1e-12, "slot {i}: {v}");
        }
    }

    #[test]
    fn constant_patch_stays_constant() {
        let b = TransformMatrix::circular(7, 1).unwrap();
        let out = resample_patch(&vec![2.5f64; 49], &b).unwrap();
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn reparameterize_matches_dense_product() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let b = TransformMatrix::circular(3, 1).unwrap();
        let dense = b.to_dense();
        let w = vec![1.0f64; 9];
        let out = reparameterize(&w, &b).unwrap();
        for s in 0..9 {
            let col_sum: f64 = (0..9).map(|r| dense[r][s]).sum();
            assert!((out[s] - col_sum).abs() < 1e-12);
        }
        let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = reparameterize(&w, &b).unwrap();
        for s in 0..9 {
            let v: f64 = (0..9).map(|r| w[r] * dense[r][s]).sum();
            assert!((out[s] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_matches_direct_interpolation() {
        let mut rng = SplitMix64::seed_from_u64(11);
        let b = TransformMatrix::circular(3, 1).unwrap();
        let pts = circular_points(3, 1).unwrap();
        let patch: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = resample_patch(&patch, &b).unwrap();
        for (r, p) in pts.points().iter().enumerate() {
            // direct bilinear lookup in (row, col) image coordinates
            let col = p.x + 1.0;
            let row = 1.0 - p.y;
            let (r0, c0) = (row.floor(), col.floor());
            let (fr, fc) = (row - r0, col - c0);
            let at = |rr: f64, cc: f64| -> f64 {
                if (0.0..3.0).contains(&rr) && (0.0..3.0).contains(&cc) {
                    patch[rr as usize * 3 + cc as usize]
                } else {
                    0.0
                }
            };
            let direct = (1.0 - fr) * (1.0 - fc) * at(r0, c0)
                + (1.0 - fr) * fc * at(r0, c0 + 1.0)
                + fr * (1.0 - fc) * at(r0 + 1.0, c0)
                + fr * fc * at(r0 + 1.0, c0 + 1.0);
            assert!((out[r] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn pushforward_matches_finite_differences() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let b = TransformMatrix::circular(5, 1).unwrap();
        let target: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss = 0.5 * |reparameterize(w) - target|^2
        let loss = |w: &[f64]| -> f64 {
            let e = reparameterize(w, &b).unwrap();
            e.iter().zip(&target).map(|(a, t)| 0.5 * (a - t) * (a - t)).sum()
        };
        let e = reparameterize(&w, &b).unwrap();
        let g_eff: Vec<f64> = e.iter().zip(&target).map(|(a, t)| a - t).collect();
        let analytic = transform_gradient_pushforward(&g_eff, &b).unwrap();
        let eps = 1e-5;
        for i in 0..25 {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-8);
            assert!(rel < 1e-6, "slot {i}: fd {fd} analytic {}", analytic[i]);
        }
        assert!(transform_gradient_pushforward(&vec![0.0f64; 25], &b).unwrap().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn row_stochastic_and_sparse(k in prop::sample::select(vec![1usize, 3, 5, 7, 9, 11]), d in 1usize..4) {
            let b = TransformMatrix::circular(k, d).unwrap();
            for r in 0..b.dim() {
                let row: Vec<_> = b.row(r).collect();
                prop_assert!(row.len() <= 4);
                prop_assert!(row.iter().all(|&(_, v)| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn resample_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, c in -3.0f64..3.0) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let b = TransformMatrix::circular(5, 1).unwrap();
            let p: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + c * y).collect();
            let lhs = resample_patch(&mix, &b).unwrap();
            let bp = resample_patch(&p, &b).unwrap();
            let bq = resample_patch(&q, &b).unwrap();
            for i in 0..25 {
                prop_assert!((lhs[i] - (a * bp[i] + c * bq[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn reparameterize_adjoint(seed in any::<u64>(), k in prop::sample::select(vec![3usize, 5, 7])) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let b = TransformMatrix::circular(k, 1).unwrap();
            let n = k * k;
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs: f64 = reparameterize(&w, &b).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = w.iter().zip(transform_gradient_pushforward(&g, &b).unwrap()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
