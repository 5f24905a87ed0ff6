//! Centralized critics and advantage estimators.

use rand::Rng;

use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Tensor, Var};
use crate::comm::MSG_DIM;
use crate::nn::{Init, Mlp2};

pub const CRITIC_HIDDEN: usize = 64;

/// Width of a communication-critic agent feature:
/// message descriptor, mailbox, send bit and the soft assignment row.
pub fn feature_dim(n_groups: usize) -> usize {
    2 * MSG_DIM + 1 + n_groups
}

/// Assemble one agent feature.
pub fn agent_feature(z_msg: &[f64], mailbox: &[f64], sent: bool, probs: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(z_msg.len() + mailbox.len() + 1 + probs.len());
    f.extend_from_slice(z_msg);
    f.extend_from_slice(mailbox);
    f.push(if sent { 1.0 } else { 0.0 });
    f.extend_from_slice(probs);
    f
}

/// Replace the mailbox slot of a feature built by [`agent_feature`].
pub fn with_mailbox(feature: &[f64], mailbox: &[f64]) -> Vec<f64> {
    let mut f = feature.to_vec();
    f[MSG_DIM..2 * MSG_DIM].copy_from_slice(mailbox);
    f
}

/// Global state to one value per group.
#[derive(Debug, Clone)]
pub struct GroupCritic {
    pub body: Mlp2,
    pub n_groups: usize,
}

impl GroupCritic {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        state_dim: usize,
        n_groups: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        let body = Mlp2::new(
            params,
            prefix,
            &[("state", state_dim)],
            CRITIC_HIDDEN,
            n_groups,
            Init::Orthogonal(1.0),
            rng,
        )?;
        Ok(Self { body, n_groups })
    }

    /// `[S, state_dim]` to `[S, M]`.
    pub fn values(&self, tape: &mut Tape, p: &Bound, state: Var) -> Result<Var> {
        self.body.forward(tape, p, &[state])
    }
}

/// `V_i = P_i . v` for `probs: [N, M]` row-major.
pub fn per_agent_baseline(probs: &[f64], values: &[f64]) -> Vec<f64> {
    probs
        .chunks(values.len())
        .map(|row| row.iter().zip(values).map(|(p, v)| p * v).sum())
        .collect()
}

/// Message-conditioned value head and pairwise utility head.
#[derive(Debug, Clone)]
pub struct CommCritic {
    pub value: Mlp2,
    pub pair: Mlp2,
    pub feature_dim: usize,
}

impl CommCritic {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        state_dim: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        let init = Init::Orthogonal(1.0);
        Ok(Self {
            value: Mlp2::new(
                params,
                &format!("{prefix}.value"),
                &[("state", state_dim), ("feature", feature_dim)],
                CRITIC_HIDDEN,
                1,
                init,
                rng,
            )?,
            pair: Mlp2::new(
                params,
                &format!("{prefix}.pair"),
                &[("state", state_dim), ("sender", feature_dim), ("recipient", feature_dim)],
                CRITIC_HIDDEN,
                1,
                init,
                rng,
            )?,
            feature_dim,
        })
    }

    /// `V(state[state_idx[r]], feats[feat_idx[r]])` as `[R, 1]`.
    ///
    /// Each state and feature row is projected once and gathered.
    pub fn values(
        &self,
        tape: &mut Tape,
        p: &Bound,
        (state, state_idx): (Var, &[usize]),
        (feats, feat_idx): (Var, &[usize]),
    ) -> Result<Var> {
        let l1 = &self.value.first;
        let ps = l1.project(tape, p, 0, state)?;
        let ps = tape.gather_rows(ps, state_idx)?;
        let pf = l1.project(tape, p, 1, feats)?;
        let pf = tape.gather_rows(pf, feat_idx)?;
        let pre = l1.combine(tape, p, &[ps, pf])?;
        self.value.forward_from_pre(tape, p, pre)
    }

    /// `Q(state, sender feature, recipient feature)` as `[R, 1]`.
    pub fn utilities(
        &self,
        tape: &mut Tape,
        p: &Bound,
        (state, state_idx): (Var, &[usize]),
        (senders, sender_idx): (Var, &[usize]),
        (recipients, recipient_idx): (Var, &[usize]),
    ) -> Result<Var> {
        let l1 = &self.pair.first;
        let ps = l1.project(tape, p, 0, state)?;
        let ps = tape.gather_rows(ps, state_idx)?;
        let pa = l1.project(tape, p, 1, senders)?;
        let pa = tape.gather_rows(pa, sender_idx)?;
        let pb = l1.project(tape, p, 2, recipients)?;
        let pb = tape.gather_rows(pb, recipient_idx)?;
        let pre = l1.combine(tape, p, &[ps, pa, pb])?;
        self.pair.forward_from_pre(tape, p, pre)
    }
}

/// Mean squared error of `pred: [R, 1]` against constant targets.
pub fn squared_error(tape: &mut Tape, pred: Var, targets: &[f64]) -> Result<Var> {
    let t = tape.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// One-step TD target `r + gamma (1 - done) v_next`.
pub fn td_target(reward: f64, done: bool, next_value: f64, gamma: f64) -> f64 {
    reward + if done { 0.0 } else { gamma * next_value }
}

/// `U[chosen]` minus the mean of `U` over every index except `self_index`.
pub fn recipient_advantage(utilities: &[f64], chosen: usize, self_index: usize) -> f64 {
    let n = utilities.len();
    if n < 2 {
        return 0.0;
    }
    let others: f64 = utilities
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != self_index)
        .map(|(_, u)| u)
        .sum();
    utilities[chosen] - others / (n - 1) as f64
}

/// Generalized advantage estimation over one trajectory.
///
/// `values` has one more entry than `rewards`: the bootstrap value.
/// Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len + 1, "values needs a bootstrap entry");
    assert_eq!(dones.len(), t_len, "one done flag per reward");
    let mut adv = vec![0.0; t_len];
    let mut next = 0.0;
    for t in (0..t_len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}
