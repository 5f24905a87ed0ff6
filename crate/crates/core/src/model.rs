//! The shared decentralized agent network and the centralized critics.

use rand::Rng;

use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Var};
use crate::comm::{HeadLogits, PolicyHeads, MSG_DIM};
use crate::critics::{feature_dim, CommCritic, GroupCritic};
use crate::env::{GLOBAL_STATE_DIM, N_ACTIONS};
use crate::grouping::GroupModule;
use crate::nn::{Backbone, DescriptorNet, Init};

pub const HIDDEN_DIM: usize = 64;
pub const EMBED_DIM: usize = 64;
pub const GROUP_DESC_DIM: usize = 64;

/// Sizes that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub n_agents: usize,
    pub n_groups: usize,
}

/// Backbone, descriptors, prototypes and the three heads, shared by all agents.
#[derive(Debug, Clone)]
pub struct AgentNet {
    pub backbone: Backbone,
    pub descriptors: DescriptorNet,
    pub groups: GroupModule,
    pub heads: PolicyHeads,
    pub dims: ModelDims,
}

/// Outputs of one recurrent step for a batch of agent rows.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub hidden: Var,
    pub heads: HeadLogits,
}

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        dims: ModelDims,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        let init = Init::Orthogonal(1.0);
        Ok(Self {
            backbone: Backbone::new(params, "actor.backbone", dims.obs_dim, MSG_DIM, EMBED_DIM, HIDDEN_DIM, init, rng)?,
            descriptors: DescriptorNet::new(params, "actor.desc", HIDDEN_DIM, GROUP_DESC_DIM, MSG_DIM, init, rng)?,
            groups: GroupModule::new(params, "actor.groups", dims.n_groups, GROUP_DESC_DIM, rng)?,
            heads: PolicyHeads::new(params, "actor.heads", HIDDEN_DIM, N_ACTIONS, dims.n_agents, init, rng)?,
            dims,
        })
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, obs: Var, mailbox: Var, prev: Var) -> Result<StepVars> {
        let hidden = self.backbone.embed_and_step(tape, p, obs, mailbox, prev)?;
        let heads = self.heads.forward(tape, p, hidden)?;
        Ok(StepVars { hidden, heads })
    }

    pub fn group_logits(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let z = self.descriptors.grp.forward(tape, p, hidden)?;
        self.groups.logits(tape, p, z)
    }

    pub fn message(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        self.descriptors.msg.forward(tape, p, hidden)
    }
}

/// Every network of a run plus its parameters.
///
/// The communication critic keeps its own parameter set so it can take an
/// optimizer step on its TD loss alone, and a Polyak-averaged target copy.
#[derive(Debug, Clone)]
pub struct Model {
    pub agent: AgentNet,
    pub group_critic: GroupCritic,
    pub comm_critic: CommCritic,
    /// Agent network and group critic.
    pub params: ParameterSet,
    pub comm_params: ParameterSet,
    pub comm_target: ParameterSet,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> std::result::Result<Self, ParamError> {
        let mut params = ParameterSet::new();
        let agent = AgentNet::new(&mut params, dims, rng)?;
        let group_critic = GroupCritic::new(&mut params, "critic.group", GLOBAL_STATE_DIM, dims.n_groups, rng)?;
        let mut comm_params = ParameterSet::new();
        let comm_critic = CommCritic::new(
            &mut comm_params,
            "critic.comm",
            GLOBAL_STATE_DIM,
            feature_dim(dims.n_groups),
            rng,
        )?;
        let comm_target = ParameterSet::from_records(comm_params.snapshot());
        Ok(Self {
            agent,
            group_critic,
            comm_critic,
            params,
            comm_params,
            comm_target,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.agent.dims
    }
}
