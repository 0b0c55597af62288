use orbiconv::autodiff::softmax;
use orbiconv::experiments::config::Config;
use orbiconv::experiments::{warp_image, WarpMode};
use orbiconv::geometry::{circular_points, square_points};
use orbiconv::transform::{reparameterize, transform_gradient_pushforward};
use orbiconv::{Tensor, TransformMatrix};
use proptest::prelude::*;

fn odd_size() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(3), Just(5), Just(7), Just(9)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_rows_are_convex_and_sparse(k in odd_size(), d in 1usize..4) {
        let b = TransformMatrix::circular(k, d).unwrap();
        prop_assert_eq!(b.dim(), k * k);
        for r in 0..b.dim() {
            let row: Vec<(usize, f64)> = b.row(r).collect();
            prop_assert!(row.len() <= 4);
            prop_assert!(row.iter().all(|&(c, v)| c < k * k && v > 0.0 && v <= 1.0));
            prop_assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn transform_is_independent_of_dilation(k in odd_size(), d in 2usize..5) {
        let (a, b) = (TransformMatrix::circular(k, 1).unwrap().to_dense(), TransformMatrix::circular(k, d).unwrap().to_dense());
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterization_is_adjoint_to_resampling(
        k in prop_oneof![Just(3usize), Just(5), Just(7)],
        seed in any::<u64>(),
    ) {
        let b = TransformMatrix::circular(k, 1).unwrap();
        let n = k * k;
        let vals: Vec<f64> = (0..2 * n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 / 500.0) - 1.0).collect();
        let (w, p) = vals.split_at(n);
        let lhs: f64 = reparameterize(w, &b).unwrap().iter().zip(p).map(|(a, b)| a * b).sum();
        let rhs: f64 = w.iter().zip(b.apply(p).unwrap()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
        prop_assert_eq!(transform_gradient_pushforward(p, &b).unwrap(), b.apply(p).unwrap());
    }

    #[test]
    fn circular_points_stay_inside_the_square_footprint(k in odd_size(), d in 1usize..4) {
        let circ = circular_points(k, d).unwrap();
        let sq = square_points(k, d).unwrap();
        let reach = (d * (k / 2)) as f64;
        prop_assert_eq!(circ.len(), sq.len());
        prop_assert_eq!(circ.rings(), sq.rings());
        for (p, &ring) in circ.points().iter().zip(circ.rings()) {
            prop_assert!(((p.x * p.x + p.y * p.y).sqrt() - (d * ring) as f64).abs() < 1e-12);
            prop_assert!(p.x.abs() <= reach + 1e-12 && p.y.abs() <= reach + 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in prop::collection::vec(-30.0f64..30.0, 1..16), c in -50.0f64..50.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orbt_round_trips(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let t = Tensor::<f64>::from_vec(&dims, (0..n).map(|i| (i as f64 + seed as f64).sin()).collect()).unwrap();
        let mut buf = Vec::new();
        t.write_orbt(&mut buf).unwrap();
        let back = Tensor::<f64>::read_orbt(buf.as_slice()).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn quarter_turns_are_exact(n in 2usize..9, seed in any::<u32>()) {
        let img: Vec<f32> = (0..n * n).map(|i| ((i as u32 ^ seed) % 97) as f32 / 97.0).collect();
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = warp_image(&cur, n, n, 90.0, WarpMode::Rotate).unwrap();
        }
        prop_assert_eq!(cur, img);
    }

    #[test]
    fn config_canonical_form_round_trips(
        entries in prop::collection::btree_map("[a-z]{1,6}\\.[a-z_]{1,8}", "[a-z0-9.,_-]{1,10}", 0..8),
    ) {
        let text: String = entries.iter().map(|(k, v)| format!("  {k}={v}  # note\n")).collect();
        let c = Config::parse(&text).unwrap();
        let again = Config::parse(&c.canonical()).unwrap();
        prop_assert_eq!(again.canonical(), c.canonical());
        prop_assert_eq!(again.hash(), c.hash());
        for (k, v) in &entries {
            prop_assert_eq!(c.raw(k), Some(v.as_str()));
        }
    }
}
