mod common;

use common::{brute_force_genotype, direct_circular_conv, random_vec};
use orbiconv::nas::{cell_edges, discretize, genotype_to_dot, CellGenotype, CellType, GenotypeNode, NodeInput, OpKind, OpSpace};
use orbiconv::nn::conv::{conv2d, Conv2dParams};
use orbiconv::nn::layers::{ConvLayer, ConvSpec, ShapeMode};
use orbiconv::nn::ParamStore;
use orbiconv::rng::SplitMix64;
use orbiconv::Tensor;
use rand::SeedableRng;

#[test]
fn circular_layer_matches_direct_sampling_across_channels() {
    let mut rng = SplitMix64::seed_from_u64(1);
    let (cin, cout, h, w) = (2, 3, 9, 7);
    for (k, d) in [(3, 1), (5, 1), (5, 2), (7, 1)] {
        let mut store = ParamStore::<f64>::new();
        let spec = ConvSpec { padding: d * (k / 2), dilation: d, ..ConvSpec::same(cin, cout, k, ShapeMode::Circular) };
        let layer = ConvLayer::new(&mut store, "conv", spec, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, cin, h, w], random_vec(&mut rng, cin * h * w)).unwrap();
        let y = conv2d(&x, &layer.effective_weight(&store, true), None, &layer.conv_params()).unwrap();

        let raw = store.get(layer.weight).data();
        for o in 0..cout {
            let mut expect = vec![0.0; h * w];
            for i in 0..cin {
                let plane = &x.data()[i * h * w..(i + 1) * h * w];
                let kernel = &raw[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
                for (e, v) in expect.iter_mut().zip(direct_circular_conv(plane, h, w, kernel, k, d)) {
                    *e += v;
                }
            }
            let got = &y.data()[o * h * w..(o + 1) * h * w];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10, "K={k} d={d}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn square_layer_is_plain_convolution() {
    let mut rng = SplitMix64::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let layer = ConvLayer::new(&mut store, "conv", ConvSpec::same(1, 1, 3, ShapeMode::Square), &mut rng).unwrap();
    assert_eq!(layer.effective_weight(&store, false).data(), store.get(layer.weight).data());
    let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let y = conv2d(&x, store.get(layer.weight), None, &Conv2dParams { padding: 1, ..Default::default() }).unwrap();
    assert_eq!(y.data()[0], 2.0 * store.get(layer.weight).data()[4]);
}

#[test]
fn discretize_matches_exhaustive_ranking_in_restricted_spaces() {
    let mut rng = SplitMix64::seed_from_u64(3);
    let spaces = [
        OpSpace::baseline(),
        OpSpace::new(vec![OpKind::Zero, OpKind::CircSepConv5x5, OpKind::SepConv5x5]).unwrap(),
        OpSpace::new(vec![OpKind::Identity, OpKind::Zero]).unwrap(),
    ];
    for space in &spaces {
        for nodes in 3..=7 {
            for _ in 0..20 {
                let alphas: Vec<Vec<f64>> =
                    (0..cell_edges(nodes).len()).map(|_| random_vec(&mut rng, space.len()).iter().map(|v| 4.0 * v).collect()).collect();
                let g = discretize(CellType::Reduction, nodes, &alphas, space).unwrap();
                let got: Vec<Vec<(usize, OpKind)>> = g.nodes.iter().map(|n| n.inputs.iter().map(|i| (i.from, i.op)).collect()).collect();
                assert_eq!(got, brute_force_genotype(&alphas, nodes, space));
            }
        }
    }
}

#[test]
fn dot_output_matches_golden_file() {
    let node = |a: (usize, OpKind), b: (usize, OpKind)| GenotypeNode {
        inputs: vec![NodeInput { from: a.0, op: a.1 }, NodeInput { from: b.0, op: b.1 }],
    };
    let g = CellGenotype {
        cell_type: CellType::Reduction,
        nodes: vec![
            node((0, OpKind::CircSepConv5x5), (1, OpKind::MaxPool3x3)),
            node((1, OpKind::SepConv3x3), (2, OpKind::Identity)),
            node((0, OpKind::DilConv5x5), (3, OpKind::CircDilConv5x5)),
        ],
    };
    let golden = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/reduction_cell.dot")).unwrap();
    assert_eq!(genotype_to_dot(&g), golden);
    assert_eq!(CellGenotype::from_json(&g.to_json()).unwrap(), g);
}
