//! Per-update targets and advantages computed from a finished rollout.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParameterSet, Tape, Tensor};
use crate::comm::MSG_DIM;
use crate::critics::{agent_feature, per_agent_baseline, recipient_advantage, td_target, with_mailbox};
use crate::env::GLOBAL_STATE_DIM;
use crate::grouping::{grouping_advantage, random_permutation};
use crate::model::Model;

use super::rollout::{Rollout, Trajectory};
use super::TrainError;

/// Derived training signals for one trajectory. Per-agent vectors are
/// indexed `t * N + i`.
#[derive(Debug, Clone)]
pub struct TrajectoryTargets {
    pub adv_env: Vec<f64>,
    pub returns: Vec<f64>,
    pub adv_send: Vec<Option<f64>>,
    pub adv_recv: Vec<Option<f64>>,
    /// One-step target for the message-conditioned value of `(t, i)`.
    pub td_target: Vec<Option<f64>>,
    /// `[T * N * F]` agent features.
    pub features: Vec<f64>,
    /// Grouping advantage per bundle (fresh bundles only).
    pub group_adv: Vec<Option<Vec<f64>>>,
    /// `[N * N]` utilities at each fresh bundle's first step, when defined.
    pub bundle_utilities: Vec<Option<Vec<f64>>>,
}

impl TrajectoryTargets {
    pub fn feature(&self, row: usize, width: usize) -> &[f64] {
        &self.features[row * width..(row + 1) * width]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PrepSettings {
    pub gamma: f64,
    pub gae_lambda: f64,
}

/// Agent features for every step of a trajectory.
pub fn trajectory_features(traj: &Trajectory, n: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for s in &traj.steps {
        let probs = &traj.bundles[s.bundle].probs;
        for i in 0..n {
            out.extend(agent_feature(
                &s.z_msg[i * MSG_DIM..(i + 1) * MSG_DIM],
                &s.mailbox[i * MSG_DIM..(i + 1) * MSG_DIM],
                s.sends[i],
                &probs[i * m..(i + 1) * m],
            ));
        }
    }
    out
}

/// Group values `[S * M]` for stacked global states.
pub fn group_values(model: &Model, states: &[&[f64]]) -> Result<Vec<f64>, TrainError> {
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let data: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
    let s = tape.constant(Tensor::matrix(states.len(), GLOBAL_STATE_DIM, data)?);
    let v = model.group_critic.values(&mut tape, &p, s)?;
    Ok(tape.value(v).data().to_vec())
}

/// Batched evaluation of the message-conditioned value head.
pub fn comm_values(
    model: &Model,
    params: &ParameterSet,
    states: &Tensor,
    state_idx: &[usize],
    feats: &Tensor,
) -> Result<Vec<f64>, TrainError> {
    if state_idx.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let s = tape.constant(states.clone());
    let f = tape.constant(feats.clone());
    let idx: Vec<usize> = (0..state_idx.len()).collect();
    let v = model.comm_critic.values(&mut tape, &p, (s, state_idx), (f, &idx))?;
    Ok(tape.value(v).data().to_vec())
}

/// Batched pairwise utilities `Q(state, sender feature, recipient feature)`.
pub fn comm_utilities(
    model: &Model,
    params: &ParameterSet,
    states: &Tensor,
    state_idx: &[usize],
    senders: &Tensor,
    recipients: &Tensor,
) -> Result<Vec<f64>, TrainError> {
    if state_idx.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let s = tape.constant(states.clone());
    let a = tape.constant(senders.clone());
    let b = tape.constant(recipients.clone());
    let idx: Vec<usize> = (0..state_idx.len()).collect();
    let u = model.comm_critic.utilities(&mut tape, &p, (s, state_idx), (a, &idx), (b, &idx))?;
    Ok(tape.value(u).data().to_vec())
}

fn stack(rows: &[&[f64]], width: usize) -> Result<Tensor, TrainError> {
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::matrix(rows.len(), width, data)?)
}

/// Recursive GAE with per-step bootstrap values and episode cuts.
///
/// `next_values[t]` is the value used after step `t`: `V(s_{t+1})`, the value
/// of the final state at truncation, or 0 at a terminal step.
pub fn gae_with_bootstrap(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    cuts: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        acc = delta + if cuts[t] { 0.0 } else { gamma * lambda * acc };
        adv[t] = acc;
    }
    adv
}

/// Environment-head advantages and returns for one trajectory.
fn env_targets(
    model: &Model,
    traj: &Trajectory,
    settings: PrepSettings,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let dims = model.dims();
    let (n, m) = (dims.n_agents, dims.n_groups);
    let steps = &traj.steps;
    let t_len = steps.len();
    let mut states: Vec<&[f64]> = steps.iter().map(|s| s.state.as_slice()).collect();
    let mut final_row = vec![usize::MAX; t_len];
    for (t, s) in steps.iter().enumerate() {
        if let Some(f) = &s.final_state {
            final_row[t] = states.len();
            states.push(f);
        }
    }
    let last_row = states.len();
    states.push(&traj.last_state);
    let v = group_values(model, &states)?;
    let vrow = |r: usize| &v[r * m..(r + 1) * m];

    let mut adv = vec![0.0; t_len * n];
    let mut ret = vec![0.0; t_len * n];
    for i in 0..n {
        let mut values = Vec::with_capacity(t_len);
        let mut next = Vec::with_capacity(t_len);
        let mut cuts = Vec::with_capacity(t_len);
        let mut rewards = Vec::with_capacity(t_len);
        for (t, s) in steps.iter().enumerate() {
            let p = &traj.bundles[s.bundle].probs[i * m..(i + 1) * m];
            values.push(per_agent_baseline(p, vrow(t))[0]);
            rewards.push(s.reward);
            cuts.push(s.done);
            let nv = if s.terminal {
                0.0
            } else if s.done {
                per_agent_baseline(p, vrow(final_row[t]))[0]
            } else if t + 1 < t_len {
                let pn = &traj.bundles[steps[t + 1].bundle].probs[i * m..(i + 1) * m];
                per_agent_baseline(pn, vrow(t + 1))[0]
            } else {
                per_agent_baseline(p, vrow(last_row))[0]
            };
            next.push(nv);
        }
        let a = gae_with_bootstrap(&rewards, &values, &next, &cuts, settings.gamma, settings.gae_lambda);
        for t in 0..t_len {
            adv[t * n + i] = a[t];
            ret[t * n + i] = a[t] + values[t];
        }
    }
    Ok((adv, ret))
}

/// Whether step `t + 1` continues the episode of step `t` inside the rollout.
fn has_successor(traj: &Trajectory, t: usize) -> bool {
    t + 1 < traj.steps.len() && !traj.steps[t].done
}

/// Message-value TD targets from the target network: `r_t` at terminal steps,
/// `r_t + gamma V'(s_{t+1}, f_{t+1})` when the successor is in the rollout,
/// undefined otherwise.
pub fn td_targets(
    model: &Model,
    traj: &Trajectory,
    features: &[f64],
    gamma: f64,
) -> Result<Vec<Option<f64>>, TrainError> {
    let dims = model.dims();
    let n = dims.n_agents;
    let fd = model.comm_critic.feature_dim;
    let t_len = traj.steps.len();
    let states: Vec<&[f64]> = traj.steps.iter().map(|s| s.state.as_slice()).collect();
    let states = stack(&states, GLOBAL_STATE_DIM)?;
    let mut state_idx = Vec::new();
    let mut feat_rows: Vec<&[f64]> = Vec::new();
    let mut slots = Vec::new();
    for t in 0..t_len {
        if has_successor(traj, t) {
            for i in 0..n {
                let row = (t + 1) * n + i;
                state_idx.push(t + 1);
                feat_rows.push(&features[row * fd..(row + 1) * fd]);
                slots.push(t * n + i);
            }
        }
    }
    let next = if feat_rows.is_empty() {
        Vec::new()
    } else {
        comm_values(model, &model.comm_target, &states, &state_idx, &stack(&feat_rows, fd)?)?
    };
    let mut out = vec![None; t_len * n];
    for (t, s) in traj.steps.iter().enumerate() {
        if s.terminal {
            for i in 0..n {
                out[t * n + i] = Some(td_target(s.reward, true, 0.0, gamma));
            }
        }
    }
    for (k, slot) in slots.into_iter().enumerate() {
        let t = slot / n;
        out[slot] = Some(td_target(traj.steps[t].reward, false, next[k], gamma));
    }
    Ok(out)
}

/// Send and recipient advantages from the online communication critic, and
/// utility rows at fresh bundle starts.
#[allow(clippy::type_complexity)]
fn comm_advantages(
    model: &Model,
    traj: &Trajectory,
    features: &[f64],
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>, Vec<Option<Vec<f64>>>), TrainError> {
    let dims = model.dims();
    let n = dims.n_agents;
    let fd = model.comm_critic.feature_dim;
    let t_len = traj.steps.len();
    let feat = |row: usize| &features[row * fd..(row + 1) * fd];
    let states: Vec<&[f64]> = traj.steps.iter().map(|s| s.state.as_slice()).collect();
    let states = stack(&states, GLOBAL_STATE_DIM)?;

    // Send advantage: value of the recipient's next feature with and without
    // the sender's message.
    let mut v_state = Vec::new();
    let mut v_feats: Vec<Vec<f64>> = Vec::new();
    let mut send_slots = Vec::new();
    // Utilities for every (sender row, recipient) pair that is needed.
    let mut u_state = Vec::new();
    let mut u_send: Vec<&[f64]> = Vec::new();
    let mut u_recv: Vec<&[f64]> = Vec::new();
    let mut u_rows: Vec<(usize, usize)> = Vec::new();
    let mut bundle_start = vec![None; t_len];
    for (b, bundle) in traj.bundles.iter().enumerate() {
        if bundle.fresh {
            bundle_start[bundle.start] = Some(b);
        }
    }
    for t in 0..t_len {
        if !has_successor(traj, t) {
            continue;
        }
        let s = &traj.steps[t];
        let messages: Vec<Vec<f64>> = s.z_msg.chunks(MSG_DIM).map(<[f64]>::to_vec).collect();
        // Only the cached weights matter for leave-one-out.
        let boxes = crate::comm::Mailboxes {
            boxes: vec![vec![0.0; MSG_DIM]; n],
            incoming: s.incoming.clone(),
        };
        for i in 0..n {
            let full_row = bundle_start[t].is_some();
            if !s.sends[i] && !full_row {
                continue;
            }
            if s.sends[i] {
                let j = s.recipients[i];
                let next_feat = feat((t + 1) * n + j);
                let loo = boxes.leave_one_out(&messages, i, j)?;
                v_state.push(t + 1);
                v_feats.push(next_feat.to_vec());
                v_state.push(t + 1);
                v_feats.push(with_mailbox(next_feat, &loo));
                send_slots.push(t * n + i);
            }
            for j in 0..n {
                u_state.push(t + 1);
                u_send.push(feat(t * n + i));
                u_recv.push(feat((t + 1) * n + j));
                u_rows.push((t * n + i, j));
            }
        }
    }
    let mut adv_send = vec![None; t_len * n];
    if !v_feats.is_empty() {
        let rows: Vec<&[f64]> = v_feats.iter().map(Vec::as_slice).collect();
        let v = comm_values(model, &model.comm_params, &states, &v_state, &stack(&rows, fd)?)?;
        for (k, slot) in send_slots.into_iter().enumerate() {
            adv_send[slot] = Some(v[2 * k] - v[2 * k + 1]);
        }
    }
    let mut utilities = vec![f64::NAN; t_len * n * n];
    if !u_rows.is_empty() {
        let u = comm_utilities(
            model,
            &model.comm_params,
            &states,
            &u_state,
            &stack(&u_send, fd)?,
            &stack(&u_recv, fd)?,
        )?;
        for (k, (row, j)) in u_rows.into_iter().enumerate() {
            utilities[row * n + j] = u[k];
        }
    }
    let mut adv_recv = vec![None; t_len * n];
    for t in 0..t_len {
        if !has_successor(traj, t) {
            continue;
        }
        let s = &traj.steps[t];
        for i in 0..n {
            if s.sends[i] && n > 1 {
                let row = &utilities[(t * n + i) * n..(t * n + i + 1) * n];
                adv_recv[t * n + i] = Some(recipient_advantage(row, s.recipients[i], i));
            }
        }
    }
    let bundle_utilities = traj
        .bundles
        .iter()
        .map(|b| {
            (b.fresh && has_successor(traj, b.start))
                .then(|| utilities[b.start * n * n..(b.start + 1) * n * n].to_vec())
        })
        .collect();
    Ok((adv_send, adv_recv, bundle_utilities))
}

/// Permutation-baseline grouping advantage for each fresh bundle.
fn group_advantages(
    model: &Model,
    traj: &Trajectory,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<Vec<f64>>>, TrainError> {
    let m = model.dims().n_groups;
    let fresh: Vec<usize> = (0..traj.bundles.len()).filter(|b| traj.bundles[*b].fresh).collect();
    if fresh.is_empty() {
        return Ok(vec![None; traj.bundles.len()]);
    }
    let states: Vec<&[f64]> = fresh
        .iter()
        .map(|b| traj.steps[traj.bundles[*b].start].state.as_slice())
        .collect();
    let v = group_values(model, &states)?;
    let mut out = vec![None; traj.bundles.len()];
    for (k, &b) in fresh.iter().enumerate() {
        let perm = random_permutation(rng, m);
        out[b] = Some(grouping_advantage(&traj.bundles[b].probs, &v[k * m..(k + 1) * m], &perm));
    }
    Ok(out)
}

/// Targets that depend only on the critics' current parameters, computed
/// before the communication critic's TD step.
pub fn critic_targets(
    model: &Model,
    rollout: &Rollout,
    settings: PrepSettings,
) -> Result<Vec<(Vec<f64>, Vec<Option<f64>>)>, TrainError> {
    let dims = model.dims();
    rollout
        .trajectories
        .iter()
        .map(|traj| {
            let f = trajectory_features(traj, dims.n_agents, dims.n_groups);
            let td = td_targets(model, traj, &f, settings.gamma)?;
            Ok((f, td))
        })
        .collect()
}

/// Complete the per-trajectory targets after the TD step.
pub fn finish_targets(
    model: &Model,
    rollout: &Rollout,
    critic: Vec<(Vec<f64>, Vec<Option<f64>>)>,
    settings: PrepSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrajectoryTargets>, TrainError> {
    rollout
        .trajectories
        .iter()
        .zip(critic)
        .map(|(traj, (features, td_target))| {
            let (adv_env, returns) = env_targets(model, traj, settings)?;
            let (adv_send, adv_recv, bundle_utilities) = comm_advantages(model, traj, &features)?;
            let group_adv = group_advantages(model, traj, rng)?;
            Ok(TrajectoryTargets {
                adv_env,
                returns,
                adv_send,
                adv_recv,
                td_target,
                features,
                group_adv,
                bundle_utilities,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_gae_matches_plain_recursion() {
        let r = [1.0, 0.0, 2.0, -1.0];
        let v = [0.5, 0.2, -0.3, 0.1, 0.7];
        let dones = [false, true, false, false];
        let (plain, _) = crate::critics::gae(&r, &v, &dones, 0.9, 0.8);
        let next: Vec<f64> = (0..4).map(|t| if dones[t] { 0.0 } else { v[t + 1] }).collect();
        let ours = gae_with_bootstrap(&r, &v[..4], &next, &dones, 0.9, 0.8);
        for (a, b) in plain.iter().zip(&ours) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
