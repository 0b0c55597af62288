//! Datasets, warping, robustness sweeps, kernel comparisons and run
//! bookkeeping.

pub mod compare;
pub mod config;
pub mod data;
pub mod manifest;
pub mod robustness;
pub mod svg;
pub mod warp;

pub use compare::{compare_kernels, compare_kernels_with, CompareConfig, CompareReport, CompareRow, CompareSummary};
pub use config::{Config, DataSource};
pub use data::{gen_synthetic, load_idx, Dataset, Split, SyntheticKind};
pub use manifest::{content_hash, Manifest};
pub use robustness::{robustness_eval, RobustnessSweep, RobustnessTable};
pub use warp::{warp_image, WarpMode};
