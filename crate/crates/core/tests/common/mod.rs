//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use orbiconv::geometry::circular_points;
use orbiconv::nas::{cell_edges, OpKind, OpSpace};
use rand::Rng;

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Circular convolution evaluated the slow way: every output pixel reads the
/// image at each fractional sample position by bilinear interpolation on the
/// dilated lattice around it, zero outside the image. The sample offset
/// `(x, y)` with y up lands at row `-y`, column `+x`.
pub fn direct_circular_conv(image: &[f64], h: usize, w: usize, weights: &[f64], k: usize, d: usize) -> Vec<f64> {
    let pts = circular_points(k, d).unwrap();
    let pixel = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            image[r as usize * w + c as usize]
        }
    };
    let df = d as f64;
    let mut out = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let mut acc = 0.0;
            for (p, &wt) in pts.points().iter().zip(weights) {
                // Lattice coordinates of the sample relative to (r, c).
                let (u, v) = (-p.y / df, p.x / df);
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                let mut s = 0.0;
                for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
                    for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
                        if wu * wv != 0.0 {
                            let rr = r + d as i64 * (u0 + du) as i64;
                            let cc = c + d as i64 * (v0 + dv) as i64;
                            s += wu * wv * pixel(rr, cc);
                        }
                    }
                }
                acc += wt * s;
            }
            out[(r * w as i64 + c) as usize] = acc;
        }
    }
    out
}

/// Reference discretization by exhaustive search: for every node, try every
/// pair of incoming edges and keep the pair with the largest summed weight of
/// its best non-zero op, reading op preference straight from the logits.
/// Returns `(from, op)` pairs per node, ordered by source.
pub fn brute_force_genotype(alphas: &[Vec<f64>], num_nodes: usize, space: &OpSpace) -> Vec<Vec<(usize, OpKind)>> {
    let edges = cell_edges(num_nodes);
    let best = |a: &[f64]| -> (usize, f64) {
        let z: f64 = a.iter().map(|v| v.exp()).sum();
        let (i, v) = a
            .iter()
            .enumerate()
            .filter(|(i, _)| space.ops()[*i] != OpKind::Zero)
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        (i, v.exp() / z)
    };
    (2..num_nodes)
        .map(|j| {
            let incoming: Vec<usize> = (0..edges.len()).filter(|&e| edges[e].1 == j).collect();
            let mut chosen = (f64::NEG_INFINITY, 0, 0);
            for (x, &e1) in incoming.iter().enumerate() {
                for &e2 in &incoming[x + 1..] {
                    let total = best(&alphas[e1]).1 + best(&alphas[e2]).1;
                    if total > chosen.0 {
                        chosen = (total, e1, e2);
                    }
                }
            }
            let mut pair: Vec<(usize, OpKind)> =
                [chosen.1, chosen.2].iter().map(|&e| (edges[e].0, space.ops()[best(&alphas[e]).0])).collect();
            pair.sort_by_key(|p| p.0);
            pair
        })
        .collect()
}
