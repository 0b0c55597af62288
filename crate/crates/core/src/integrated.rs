//! Integrated kernels: one shared weight tensor read through either the square
//! (identity) or the circular transformation, re-drawn per layer per iteration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{ConvLayer, ConvSpec, Phase, ShapeMode};
use crate::nn::params::ParamStore;
use crate::rng::{self, SplitMix64};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Square,
    Circular,
}

/// Sampling used outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalBranch {
    Square,
    Circular,
    /// Expected kernel `p·WᵀB + (1-p)·W`.
    Average,
}

impl std::str::FromStr for EvalBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "square" => Ok(EvalBranch::Square),
            "circular" => Ok(EvalBranch::Circular),
            "average" => Ok(EvalBranch::Average),
            other => Err(Error::Config(format!("unknown integrated.eval_branch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratedConfig {
    pub p_circular: f64,
    pub eval_branch: EvalBranch,
}

impl Default for IntegratedConfig {
    fn default() -> Self {
        Self { p_circular: 0.5, eval_branch: EvalBranch::Circular }
    }
}

#[derive(Debug, Clone)]
pub struct IntegratedConv {
    pub conv: ConvLayer,
    pub p_circular: f64,
    pub eval_branch: EvalBranch,
    seed: u64,
    stream: u64,
    current: Branch,
}

impl IntegratedConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        mut spec: ConvSpec,
        cfg: IntegratedConfig,
        seed: u64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.p_circular) {
            return Err(Error::InvalidArgument(format!("p_circular must lie in [0, 1], got {}", cfg.p_circular)));
        }
        spec.shape = ShapeMode::Integrated;
        let conv = ConvLayer::new(store, name, spec, rng)?;
        Ok(Self {
            conv,
            p_circular: cfg.p_circular,
            eval_branch: cfg.eval_branch,
            seed,
            stream: rng::stream_id(name),
            current: Branch::Circular,
        })
    }

    pub fn current_choice(&self) -> Branch {
        self.current
    }

    /// Forces the branch, bypassing the random draw.
    pub fn set_choice(&mut self, branch: Branch) {
        self.current = branch;
    }

    /// Branch for `iteration`: circular with probability `p_circular`, a pure
    /// function of `(seed, layer stream, iteration)`.
    pub fn branch_at(&self, iteration: u64) -> Branch {
        draw_branch(self.p_circular, self.seed, self.stream, iteration)
    }

    /// Draws and stores the branch used by this iteration's forward and
    /// backward passes.
    pub fn draw_branch(&mut self, iteration: u64) -> Branch {
        self.current = self.branch_at(iteration);
        self.current
    }

    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, phase: Phase) -> Result<Var> {
        let branch = match (phase, self.eval_branch) {
            (Phase::Train, _) => self.current,
            (Phase::Eval, EvalBranch::Square) => Branch::Square,
            (Phase::Eval, EvalBranch::Circular) => Branch::Circular,
            (Phase::Eval, EvalBranch::Average) => return self.forward_average(tape, store, x),
        };
        self.conv.forward_tape(tape, store, x, branch == Branch::Circular)
    }

    fn forward_average<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.conv.weight);
        let wc = tape.reparameterize(w, self.conv.transform.clone())?;
        let a = tape.scale(wc, T::of(self.p_circular));
        let b = tape.scale(w, T::of(1.0 - self.p_circular));
        let we = tape.add(a, b)?;
        let bias = self.conv.bias.map(|id| tape.param(store, id));
        tape.conv2d(x, we, bias, self.conv.conv_params())
    }
}

/// Bernoulli draw of one layer's branch.
pub fn draw_branch(p_circular: f64, seed: u64, stream: u64, iteration: u64) -> Branch {
    let u: f64 = rng::stream(seed, stream, iteration).gen();
    if u < p_circular {
        Branch::Circular
    } else {
        Branch::Square
    }
}
