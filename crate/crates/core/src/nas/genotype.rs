//! Discrete cells: genotype type, discretization of edge alphas, JSON and DOT
//! output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax;
use crate::error::{Error, Result};
use crate::nas::ops::{OpKind, OpSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduction,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
        }
    }
}

impl std::str::FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" | "normal" => Ok(CellType::Normal),
            "r" | "reduction" => Ok(CellType::Reduction),
            other => Err(Error::Config(format!("unknown cell type `{other}`"))),
        }
    }
}

/// Edges `(from, to)` of a cell with `num_nodes` nodes, the first two being
/// inputs, ordered by target then source.
pub fn cell_edges(num_nodes: usize) -> Vec<(usize, usize)> {
    (2..num_nodes).flat_map(|j| (0..j).map(move |i| (i, j))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInput {
    pub from: usize,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeNode {
    pub inputs: Vec<NodeInput>,
}

/// Discretized cell. `nodes[k]` describes cell node `k + 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub cell_type: CellType,
    pub nodes: Vec<GenotypeNode>,
}

impl CellGenotype {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("genotype JSON: {e}")))
    }

    pub fn ops(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().flat_map(|n| n.inputs.iter().map(|i| i.op))
    }

    pub fn has_circular(&self) -> bool {
        self.ops().any(OpKind::is_circular)
    }
}

/// Best non-`zero` op of one edge: `(op index, softmax weight)`, lowest index
/// on ties. `None` when the space holds only `zero`.
pub fn best_op(alpha: &[f64], space: &OpSpace) -> Option<(usize, f64)> {
    let w = softmax(alpha);
    let mut best: Option<(usize, f64)> = None;
    for (i, (&k, &wi)) in space.ops().iter().zip(&w).enumerate() {
        if k == OpKind::Zero {
            continue;
        }
        if best.is_none_or(|(_, bw)| wi > bw) {
            best = Some((i, wi));
        }
    }
    best
}

/// Keeps, for every intermediate node, the two incoming edges with the highest
/// best-op weight (ties to the lower source) and the best op on each.
/// `alphas[e]` belongs to edge `cell_edges(num_nodes)[e]`.
pub fn discretize(cell_type: CellType, num_nodes: usize, alphas: &[Vec<f64>], space: &OpSpace) -> Result<CellGenotype> {
    let edges = cell_edges(num_nodes);
    if alphas.len() != edges.len() {
        return Err(Error::Shape(format!("{} alpha rows for {} edges", alphas.len(), edges.len())));
    }
    if let Some(a) = alphas.iter().find(|a| a.len() != space.len()) {
        return Err(Error::Shape(format!("alpha row of length {} for {} operations", a.len(), space.len())));
    }
    let mut nodes = Vec::with_capacity(num_nodes.saturating_sub(2));
    for j in 2..num_nodes {
        let mut cands: Vec<(usize, usize, f64)> = edges
            .iter()
            .zip(alphas)
            .filter(|((_, to), _)| *to == j)
            .filter_map(|(&(from, _), a)| best_op(a, space).map(|(op, w)| (from, op, w)))
            .collect();
        if cands.len() < 2 {
            return Err(Error::InvalidArgument(format!("node {j} has {} candidate edges, need 2", cands.len())));
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut inputs: Vec<NodeInput> =
            cands[..2].iter().map(|&(from, op, _)| NodeInput { from, op: space.ops()[op] }).collect();
        inputs.sort_by_key(|i| i.from);
        nodes.push(GenotypeNode { inputs });
    }
    Ok(CellGenotype { cell_type, nodes })
}

fn node_label(k: usize) -> String {
    match k {
        0 => "c_{k-2}".into(),
        1 => "c_{k-1}".into(),
        _ => (k - 2).to_string(),
    }
}

/// Graphviz rendering; circular operations are drawn bold red.
pub fn genotype_to_dot(g: &CellGenotype) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "digraph {} {{", g.cell_type.name());
    let _ = writeln!(s, "  rankdir=LR;");
    let _ = writeln!(s, "  node [shape=box, style=filled, fillcolor=lightgray];");
    if g.nodes.is_empty() {
        s.push_str("}\n");
        return s;
    }
    let node = |s: &mut String, k: usize, color: &str| {
        let _ = writeln!(s, "  n{k} [label=\"{}\", fillcolor={color}];", node_label(k));
    };
    node(&mut s, 0, "darkseagreen2");
    node(&mut s, 1, "darkseagreen2");
    for k in 0..g.nodes.len() {
        node(&mut s, k + 2, "lightblue");
    }
    let _ = writeln!(s, "  out [label=\"c_{{k}}\", fillcolor=palegoldenrod];");
    for (k, n) in g.nodes.iter().enumerate() {
        for i in &n.inputs {
            let style = if i.op.is_circular() { ", color=red, fontcolor=red, penwidth=2" } else { "" };
            let _ = writeln!(s, "  n{} -> n{} [label=\"{}\"{style}];", i.from, k + 2, i.op.name());
        }
    }
    for k in 0..g.nodes.len() {
        let _ = writeln!(s, "  n{} -> out;", k + 2);
    }
    s.push_str("}\n");
    s
}
