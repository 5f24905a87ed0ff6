use rand::Rng;

use super::init::Init;
use super::layer_norm::LayerNorm;
use super::linear::Linear;
use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Var};

/// One descriptor head: `Linear -> ReLU -> Linear -> LayerNorm`.
#[derive(Debug, Clone)]
pub struct DescriptorHead {
    l1: Linear,
    l2: Linear,
    ln: LayerNorm,
}

impl DescriptorHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            l1: Linear::new(params, &format!("{prefix}.l1"), in_dim, hidden_dim, init, rng)?,
            l2: Linear::new(params, &format!("{prefix}.l2"), hidden_dim, out_dim, init, rng)?,
            ln: LayerNorm::new(params, &format!("{prefix}.ln"), out_dim)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.ln.dim
    }

    /// Pre-normalization projection.
    pub fn project(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, hidden)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, p, h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let pre = self.project(tape, p, hidden)?;
        self.ln.forward(tape, p, pre)
    }
}

/// Grouping and message descriptors computed from the backbone state.
#[derive(Debug, Clone)]
pub struct DescriptorNet {
    pub grp: DescriptorHead,
    pub msg: DescriptorHead,
}

impl DescriptorNet {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        hidden_dim: usize,
        grp_dim: usize,
        msg_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            grp: DescriptorHead::new(params, &format!("{prefix}.grp"), hidden_dim, hidden_dim, grp_dim, init, rng)?,
            msg: DescriptorHead::new(params, &format!("{prefix}.msg"), hidden_dim, hidden_dim, msg_dim, init, rng)?,
        })
    }

    /// `(z_grp, z_msg)` for a batch of hidden states.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<(Var, Var)> {
        Ok((self.grp.forward(tape, p, hidden)?, self.msg.forward(tape, p, hidden)?))
    }
}
