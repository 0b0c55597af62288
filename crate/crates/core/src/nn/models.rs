//! Small reference networks built from the layers.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::integrated::{IntegratedConfig, IntegratedConv};
use crate::nn::layers::{ConvSpec, Layer, Sequential, ShapeMode};
use crate::nn::pool::PoolParams;
use crate::rng::SplitMix64;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel_size: usize,
    pub shape: ShapeMode,
    pub num_classes: usize,
    pub integrated: IntegratedConfig,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 8,
            blocks: 3,
            kernel_size: 3,
            shape: ShapeMode::Square,
            num_classes: 2,
            integrated: IntegratedConfig::default(),
        }
    }
}

/// `blocks × (conv → affine → relu)` with 2×2 average pooling between blocks,
/// then global average pooling and a linear head. Parameter initialization
/// depends only on `seed` and the layer shapes, so square, circular and
/// integrated variants start from the same weights.
pub fn small_cnn<T: Scalar>(cfg: &CnnConfig, seed: u64) -> Result<Sequential<T>> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut net = Sequential::new();
    let mut cin = cfg.in_channels;
    for b in 0..cfg.blocks {
        let spec = ConvSpec::same(cin, cfg.width, cfg.kernel_size, cfg.shape);
        match cfg.shape {
            ShapeMode::Integrated => {
                let name = format!("layer{}", net.layers.len());
                let ic = IntegratedConv::new(&mut net.store, &name, spec, cfg.integrated, seed, &mut rng)?;
                net.push(Layer::Integrated(ic));
            }
            _ => {
                net.conv(spec, &mut rng)?;
            }
        }
        net.affine(cfg.width).push(Layer::Relu);
        if b + 1 < cfg.blocks {
            net.push(Layer::AvgPool(PoolParams::new(2, 2, 0)));
        }
        cin = cfg.width;
    }
    net.push(Layer::GlobalAvgPool);
    net.linear(cin, cfg.num_classes, &mut rng);
    Ok(net)
}
