//! Differentiable architecture search over cells whose edges mix candidate
//! operations, including circular separable convolutions.

pub mod genotype;
pub mod ops;
pub mod search;
pub mod supernet;

pub use genotype::{cell_edges, discretize, genotype_to_dot, CellGenotype, CellType, GenotypeNode, NodeInput};
pub use ops::{mixed_op_forward, mixed_op_tape, Op, OpKind, OpSpace};
pub use search::{search, AlphaSnapshot, SearchConfig, SearchEpoch, SearchOutcome, SearchReport};
pub use supernet::{SearchCell, Supernet, SupernetConfig};
