use rand::Rng;

use super::init::Init;
use super::linear::{Linear, SplitLinear};
use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Var};

/// `Linear -> ReLU -> Linear -> ReLU -> Linear` body used by the critics.
///
/// The first layer takes its input as named blocks (see [`SplitLinear`]).
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub first: SplitLinear,
    pub second: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        blocks: &[(&str, usize)],
        hidden_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            first: SplitLinear::new(params, &format!("{prefix}.l1"), blocks, hidden_dim, init, rng)?,
            second: Linear::new(params, &format!("{prefix}.l2"), hidden_dim, hidden_dim, init, rng)?,
            out: Linear::new(params, &format!("{prefix}.l3"), hidden_dim, out_dim, init, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.first.blocks.iter().map(|b| b.1).sum()
    }

    /// Everything after the first layer's pre-activation.
    pub fn forward_from_pre(&self, tape: &mut Tape, p: &Bound, pre: Var) -> Result<Var> {
        let h = tape.relu(pre)?;
        let h = self.second.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, inputs: &[Var]) -> Result<Var> {
        let pre = self.first.forward(tape, p, inputs)?;
        self.forward_from_pre(tape, p, pre)
    }
}
