//! Over-parameterized network of search cells.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nas::genotype::{cell_edges, discretize, CellGenotype, CellType};
use crate::nas::ops::{affine_params, mixed_op_tape, Op, OpSpace};
use crate::nn::layers::{ConvLayer, ConvSpec, Model, Phase, ShapeMode};
use crate::nn::params::{kaiming_uniform, ParamGroup, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Shape of a supernet.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the first cell.
    pub channels: usize,
    /// Nodes per cell including the two inputs.
    pub num_nodes: usize,
    pub cells: Vec<CellType>,
    pub ops: OpSpace,
    /// 3×3 convolution + affine in front of the first cell; without it the
    /// first cell reads the image directly.
    pub stem: bool,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            channels: 8,
            num_nodes: 5,
            cells: vec![CellType::Normal, CellType::Normal, CellType::Reduction, CellType::Normal],
            ops: OpSpace::default(),
            stem: true,
        }
    }
}

/// relu → 1×1 conv → affine, mapping a cell input to the cell's width.
#[derive(Debug, Clone)]
struct Preprocess {
    conv: ConvLayer,
    scale: ParamId,
    shift: ParamId,
}

impl Preprocess {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut SplitMix64) -> Result<Self> {
        let spec = ConvSpec { stride, padding: 0, ..ConvSpec::same(cin, cout, 1, ShapeMode::Square) };
        let conv = ConvLayer::new(store, name, spec, rng)?;
        let (scale, shift) = affine_params(store, name, cout);
        Ok(Self { conv, scale, shift })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = tape.relu(x);
        let h = self.conv.forward_tape(tape, store, h, false)?;
        let (s, b) = (tape.param(store, self.scale), tape.param(store, self.shift));
        tape.affine(h, s, b)
    }
}

#[derive(Debug, Clone)]
pub struct SearchCell {
    pub cell_type: CellType,
    pre0: Preprocess,
    pre1: Preprocess,
    /// Candidate ops of every edge, aligned with [`cell_edges`].
    pub edges: Vec<Vec<Op>>,
}

#[derive(Debug, Clone)]
pub struct Supernet<T> {
    pub store: ParamStore<T>,
    pub config: SupernetConfig,
    stem: Option<(ConvLayer, ParamId, ParamId)>,
    pub cells: Vec<SearchCell>,
    /// One alpha vector per edge, shared by all cells of a type.
    alphas: BTreeMap<CellType, Vec<ParamId>>,
    head: (ParamId, ParamId),
}

impl<T: Scalar> Supernet<T> {
    pub fn new(config: SupernetConfig, seed: u64) -> Result<Self> {
        if config.num_nodes < 3 {
            return Err(Error::Config(format!("cells need at least 3 nodes, got {}", config.num_nodes)));
        }
        if config.cells.is_empty() || config.channels == 0 {
            return Err(Error::Config("supernet needs at least one cell and one channel".into()));
        }
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let c_in = if config.stem { c } else { config.in_channels };
        let stem = if config.stem {
            let conv = ConvLayer::new(&mut store, "stem", ConvSpec::same(config.in_channels, c, 3, ShapeMode::Square), &mut rng)?;
            let (scale, shift) = affine_params(&mut store, "stem", c);
            Some((conv, scale, shift))
        } else {
            None
        };

        let edges = cell_edges(config.num_nodes);
        let mult = config.num_nodes - 2;
        let (mut c_pp, mut c_p, mut c_cur) = (c_in, c_in, c);
        let mut prev_reduction = false;
        let mut cells = Vec::with_capacity(config.cells.len());
        for (ci, &ty) in config.cells.iter().enumerate() {
            let reduction = ty == CellType::Reduction;
            if reduction {
                c_cur *= 2;
            }
            let name = format!("cell{ci}");
            let pre0 = Preprocess::new(&mut store, &format!("{name}.pre0"), c_pp, c_cur, if prev_reduction { 2 } else { 1 }, &mut rng)?;
            let pre1 = Preprocess::new(&mut store, &format!("{name}.pre1"), c_p, c_cur, 1, &mut rng)?;
            let mut cell_ops = Vec::with_capacity(edges.len());
            for &(i, j) in &edges {
                let stride = if reduction && i < 2 { 2 } else { 1 };
                let ops = config
                    .ops
                    .ops()
                    .iter()
                    .map(|&k| Op::new(k, &mut store, &format!("{name}.e{i}_{j}.{}", k.name()), c_cur, stride, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                cell_ops.push(ops);
            }
            cells.push(SearchCell { cell_type: ty, pre0, pre1, edges: cell_ops });
            c_pp = c_p;
            c_p = mult * c_cur;
            prev_reduction = reduction;
        }

        let mut alphas = BTreeMap::new();
        for &ty in &config.cells {
            alphas.entry(ty).or_insert_with(|| {
                edges
                    .iter()
                    .map(|&(i, j)| {
                        let a: Vec<T> = (0..config.ops.len()).map(|_| T::of(rng.gen_range(-1e-3..1e-3))).collect();
                        let t = Tensor::from_vec(&[config.ops.len()], a).expect("nonempty op space");
                        store.add(format!("alpha.{}.e{i}_{j}", ty.name()), ParamGroup::Arch, t)
                    })
                    .collect()
            });
        }

        let w = kaiming_uniform(&[config.num_classes, c_p], c_p, &mut rng);
        let hw = store.add("head.weight", ParamGroup::Weight, w);
        let hb = store.add_no_decay("head.bias", Tensor::zeros(&[config.num_classes]));
        Ok(Self { store, config, stem, cells, alphas, head: (hw, hb) })
    }

    pub fn cell_types(&self) -> Vec<CellType> {
        self.alphas.keys().copied().collect()
    }

    pub fn alpha_ids(&self, ty: CellType) -> &[ParamId] {
        self.alphas.get(&ty).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Current alphas of a cell type, one row per edge.
    pub fn alphas(&self, ty: CellType) -> Vec<Vec<f64>> {
        self.alpha_ids(ty).iter().map(|&id| self.store.get(id).data().iter().map(|v| v.f64()).collect()).collect()
    }

    pub fn set_alphas(&mut self, ty: CellType, rows: &[Vec<f64>]) -> Result<()> {
        let ids = self.alpha_ids(ty).to_vec();
        if rows.len() != ids.len() {
            return Err(Error::Shape(format!("{} alpha rows for {} edges", rows.len(), ids.len())));
        }
        for (id, row) in ids.into_iter().zip(rows) {
            let t = self.store.get_mut(id);
            if t.len() != row.len() {
                return Err(Error::Shape(format!("alpha row of {} for {} ops", row.len(), t.len())));
            }
            t.data_mut().iter_mut().zip(row).for_each(|(d, &v)| *d = T::of(v));
        }
        Ok(())
    }

    /// Genotype of every cell type present, normal first.
    pub fn genotypes(&self) -> Result<Vec<CellGenotype>> {
        self.cell_types()
            .into_iter()
            .map(|ty| discretize(ty, self.config.num_nodes, &self.alphas(ty), &self.config.ops))
            .collect()
    }

    fn cell_forward(&self, tape: &mut Tape<T>, cell: &SearchCell, s0: Var, s1: Var) -> Result<Var> {
        let mut states = vec![cell.pre0.forward(tape, &self.store, s0)?, cell.pre1.forward(tape, &self.store, s1)?];
        let alpha_ids = self.alpha_ids(cell.cell_type);
        let edges = cell_edges(self.config.num_nodes);
        for j in 2..self.config.num_nodes {
            let mut terms = Vec::new();
            for (e, &(i, to)) in edges.iter().enumerate() {
                if to != j {
                    continue;
                }
                let a = tape.param(&self.store, alpha_ids[e]);
                terms.push(mixed_op_tape(tape, &self.store, states[i], a, &cell.edges[e])?);
            }
            states.push(tape.sum(&terms)?);
        }
        tape.concat(&states[2..])
    }
}

impl<T: Scalar> Model<T> for Supernet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, _phase: Phase) -> Result<Var> {
        let stem = match &self.stem {
            Some((conv, scale, shift)) => {
                let h = conv.forward_tape(tape, &self.store, x, false)?;
                let (s, b) = (tape.param(&self.store, *scale), tape.param(&self.store, *shift));
                tape.affine(h, s, b)?
            }
            None => x,
        };
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let out = self.cell_forward(tape, cell, s0, s1)?;
            s0 = s1;
            s1 = out;
        }
        let h = tape.relu(s1);
        let pooled = tape.global_avg_pool(h)?;
        let (w, b) = (tape.param(&self.store, self.head.0), tape.param(&self.store, self.head.1));
        tape.linear(pooled, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::ops::OpKind;

    fn tiny(cells: Vec<CellType>, ops: OpSpace) -> SupernetConfig {
        SupernetConfig { channels: 2, num_nodes: 4, cells, ops, ..Default::default() }
    }

    #[test]
    fn forward_shapes_and_shared_alphas() {
        let cfg = tiny(vec![CellType::Normal, CellType::Reduction, CellType::Normal], OpSpace::default());
        let net = Supernet::<f64>::new(cfg, 0).unwrap();
        assert_eq!(net.cell_types(), vec![CellType::Normal, CellType::Reduction]);
        assert_eq!(net.store.ids(ParamGroup::Arch).len(), 2 * 5);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[3, 1, 8, 8], 0.5));
        let y = net.forward(&mut tape, x, Phase::Train).unwrap();
        assert_eq!(tape.value(y).dims(), &[3, 2]);
        let loss = tape.cross_entropy(y, &[0, 1, 0]).unwrap();
        let g = tape.backward(loss).unwrap().param_grads();
        for ty in net.cell_types() {
            for id in net.alpha_ids(ty) {
                assert!(g.contains_key(id));
            }
        }
    }

    #[test]
    fn reduction_halves_resolution() {
        let cfg = tiny(vec![CellType::Reduction], OpSpace::new(vec![OpKind::Identity, OpKind::MaxPool3x3]).unwrap());
        let net = Supernet::<f64>::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let s = tape.input(Tensor::full(&[1, 2, 8, 8], 1.0));
        let out = net.cell_forward(&mut tape, &net.cells[0], s, s).unwrap();
        assert_eq!(tape.value(out).dims(), &[1, 8, 4, 4]);
    }

    #[test]
    fn alpha_round_trip() {
        let mut net = Supernet::<f64>::new(tiny(vec![CellType::Normal], OpSpace::default()), 2).unwrap();
        let rows = vec![vec![0.25; 10]; 5];
        net.set_alphas(CellType::Normal, &rows).unwrap();
        assert_eq!(net.alphas(CellType::Normal), rows);
        assert!(net.set_alphas(CellType::Normal, &rows[..2]).is_err());
        assert_eq!(net.genotypes().unwrap().len(), 1);
    }
}
