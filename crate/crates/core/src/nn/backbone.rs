use rand::Rng;

use super::gru::GruCell;
use super::init::Init;
use super::linear::SplitLinear;
use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, TensorError, Var};

/// `hidden = GRU(ReLU(W [obs, mailbox] + b), prev)`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub embed: SplitLinear,
    pub gru: GruCell,
    pub obs_dim: usize,
    pub mailbox_dim: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        obs_dim: usize,
        mailbox_dim: usize,
        embed_dim: usize,
        hidden_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            embed: SplitLinear::new(
                params,
                &format!("{prefix}.embed"),
                &[("obs", obs_dim), ("mailbox", mailbox_dim)],
                embed_dim,
                init,
                rng,
            )?,
            gru: GruCell::new(params, &format!("{prefix}.gru"), embed_dim, hidden_dim, init, rng)?,
            obs_dim,
            mailbox_dim,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    /// One recurrent step for a batch of rows.
    pub fn embed_and_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        obs: Var,
        mailbox: Var,
        prev: Var,
    ) -> Result<Var> {
        let expect = [self.obs_dim, self.mailbox_dim, self.hidden_dim()];
        for (v, want) in [obs, mailbox, prev].into_iter().zip(expect) {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != want {
                return Err(TensorError::ShapeMismatch {
                    op: "embed_and_step",
                    lhs: s.to_vec(),
                    rhs: vec![s.first().copied().unwrap_or(0), want],
                });
            }
        }
        let e = self.embed.forward(tape, p, &[obs, mailbox])?;
        let e = tape.relu(e)?;
        self.gru.forward(tape, p, e, prev)
    }
}
