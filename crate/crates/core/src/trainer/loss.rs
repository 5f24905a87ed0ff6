//! Loss assembly over replayed time chunks.

use crate::autodiff::{Bound, Result as TensorResult, Tape, Tensor, Var};
use crate::comm::{recipient_logits, MSG_DIM};
use crate::env::GLOBAL_STATE_DIM;
use crate::grouping::{
    affinity_rows, assign, balance_loss, edge_alignment_loss, entropy_loss, pg_loss, Assignment,
};
use crate::model::{Model, HIDDEN_DIM};

use super::prep::TrajectoryTargets;
use super::rollout::{Rollout, Trajectory};
use super::TrainError;

/// Clipped PPO surrogate `-mean(min(rho A, clip(rho) A))` for `new_logp: [R, 1]`.
pub fn ppo_surrogate(tape: &mut Tape, new_logp: Var, old_logp: &[f64], adv: &[f64], clip: f64) -> TensorResult<Var> {
    let r = old_logp.len();
    let w = vec![1.0 / r as f64; r];
    weighted_surrogate(tape, new_logp, old_logp, adv, &w, clip)
}

/// `-sum_r w_r min(rho_r A_r, clip(rho_r) A_r)`.
pub fn weighted_surrogate(
    tape: &mut Tape,
    new_logp: Var,
    old_logp: &[f64],
    adv: &[f64],
    weights: &[f64],
    clip: f64,
) -> TensorResult<Var> {
    let r = old_logp.len();
    let old = tape.constant(Tensor::new(vec![r, 1], old_logp.to_vec())?);
    let a = tape.constant(Tensor::new(vec![r, 1], adv.to_vec())?);
    let w = tape.constant(Tensor::new(vec![r, 1], weights.to_vec())?);
    let diff = tape.sub(new_logp, old)?;
    let ratio = tape.exp(diff)?;
    let unclipped = tape.mul(ratio, a)?;
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let clipped = tape.mul(clipped, a)?;
    let surr = tape.minimum(unclipped, clipped)?;
    let surr = tape.mul(surr, w)?;
    let total = tape.sum(surr)?;
    tape.neg(total)
}

/// A contiguous run of steps from one trajectory under a single bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
    pub bundle: usize,
}

/// Split every trajectory at its bundle starts.
pub fn chunks(rollout: &Rollout) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (k, traj) in rollout.trajectories.iter().enumerate() {
        let mut start = 0;
        for t in 1..=traj.steps.len() {
            if t == traj.steps.len() || traj.steps[t].bundle != traj.steps[start].bundle {
                out.push(Chunk {
                    traj: k,
                    start,
                    len: t - start,
                    bundle: traj.steps[start].bundle,
                });
                start = t;
            }
        }
    }
    out
}

/// Loss weights and switches for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub clip: f64,
    pub tau: f64,
    pub value_coef: f64,
    pub comm_coef: f64,
    pub group_coef: f64,
    pub lambda_bal: f64,
    pub lambda_ent: f64,
    pub lambda_edge: f64,
    pub ent_action: f64,
    pub ent_send: f64,
    pub ent_recv: f64,
    pub counterfactual: bool,
    pub grouping: bool,
}

/// Component values of an assembled loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub env: f64,
    pub send: f64,
    pub recv: f64,
    pub value: f64,
    pub comm: f64,
    pub group: f64,
    pub entropy: f64,
    pub total: f64,
    /// Mean `|rho - 1|` of the action head.
    pub ratio_dev: f64,
}

fn add_into(tape: &mut Tape, acc: &mut Option<Var>, term: Var) -> TensorResult<()> {
    *acc = Some(match acc.take() {
        Some(a) => tape.add(a, term)?,
        None => term,
    });
    Ok(())
}

fn value_of(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item())
}

fn has_successor(traj: &Trajectory, t: usize) -> bool {
    t + 1 < traj.steps.len() && !traj.steps[t].done
}

/// Regression rows for the communication critic.
#[derive(Debug, Clone, Default)]
pub struct CommRows {
    pub states: Vec<f64>,
    pub v_state: Vec<usize>,
    pub v_feats: Vec<f64>,
    pub v_targets: Vec<f64>,
    pub q_state: Vec<usize>,
    pub q_send: Vec<f64>,
    pub q_recv: Vec<f64>,
    pub q_targets: Vec<f64>,
}

impl CommRows {
    /// Rows for the listed `(trajectory, step)` pairs: values with a defined TD
    /// target, and utilities of realized edges whose recipient has one.
    ///
    /// `view(k)` yields trajectory `k`'s flat features and TD targets.
    pub fn gather<'a>(
        rollout: &Rollout,
        view: impl Fn(usize) -> (&'a [f64], &'a [Option<f64>]),
        steps: &[(usize, usize)],
        n: usize,
        fd: usize,
    ) -> Self {
        let mut rows = CommRows::default();
        let mut state_of = std::collections::HashMap::new();
        let mut state_row = |rows: &mut CommRows, k: usize, t: usize| -> usize {
            *state_of.entry((k, t)).or_insert_with(|| {
                rows.states.extend_from_slice(&rollout.trajectories[k].steps[t].state);
                rows.states.len() / GLOBAL_STATE_DIM - 1
            })
        };
        for &(k, t) in steps {
            let traj = &rollout.trajectories[k];
            let (features, td) = view(k);
            let feature = |row: usize| &features[row * fd..(row + 1) * fd];
            for i in 0..n {
                if let Some(y) = td[t * n + i] {
                    let s = state_row(&mut rows, k, t);
                    rows.v_state.push(s);
                    rows.v_feats.extend_from_slice(feature(t * n + i));
                    rows.v_targets.push(y);
                }
            }
            if !has_successor(traj, t) {
                continue;
            }
            let step = &traj.steps[t];
            for i in 0..n {
                if !step.sends[i] {
                    continue;
                }
                let j = step.recipients[i];
                if let Some(y) = td[(t + 1) * n + j] {
                    let s = state_row(&mut rows, k, t + 1);
                    rows.q_state.push(s);
                    rows.q_send.extend_from_slice(feature(t * n + i));
                    rows.q_recv.extend_from_slice(feature((t + 1) * n + j));
                    rows.q_targets.push(y);
                }
            }
        }
        rows
    }

    pub fn is_empty(&self) -> bool {
        self.v_targets.is_empty() && self.q_targets.is_empty()
    }
}

/// `MSE_V + MSE_Q` of the communication critic; `None` when there are no rows.
pub fn comm_loss(tape: &mut Tape, model: &Model, pc: &Bound, rows: &CommRows) -> TensorResult<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let fd = model.comm_critic.feature_dim;
    let n_states = rows.states.len() / GLOBAL_STATE_DIM;
    let states = tape.constant(Tensor::matrix(n_states, GLOBAL_STATE_DIM, rows.states.clone())?);
    let mut total = None;
    if !rows.v_targets.is_empty() {
        let r = rows.v_targets.len();
        let f = tape.constant(Tensor::matrix(r, fd, rows.v_feats.clone())?);
        let idx: Vec<usize> = (0..r).collect();
        let v = model.comm_critic.values(tape, pc, (states, &rows.v_state), (f, &idx))?;
        let mse = squared(tape, v, &rows.v_targets, None)?;
        add_into(tape, &mut total, mse)?;
    }
    if !rows.q_targets.is_empty() {
        let r = rows.q_targets.len();
        let a = tape.constant(Tensor::matrix(r, fd, rows.q_send.clone())?);
        let b = tape.constant(Tensor::matrix(r, fd, rows.q_recv.clone())?);
        let idx: Vec<usize> = (0..r).collect();
        let q = model.comm_critic.utilities(tape, pc, (states, &rows.q_state), (a, &idx), (b, &idx))?;
        let mse = squared(tape, q, &rows.q_targets, None)?;
        add_into(tape, &mut total, mse)?;
    }
    Ok(total)
}

/// `sum_r w_r (pred_r - target_r)^2`, or the plain mean without weights.
fn squared(tape: &mut Tape, pred: Var, targets: &[f64], weights: Option<&[f64]>) -> TensorResult<Var> {
    let r = targets.len();
    let t = tape.constant(Tensor::new(vec![r, 1], targets.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    match weights {
        None => tape.mean(sq),
        Some(w) => {
            let w = tape.constant(Tensor::new(vec![r, 1], w.to_vec())?);
            let sq = tape.mul(sq, w)?;
            tape.sum(sq)
        }
    }
}

/// `sum_r w_r H(softmax(logits_r))` as a scalar.
fn weighted_entropy(tape: &mut Tape, logits: Var, weights: &[f64]) -> TensorResult<Var> {
    let lsm = tape.log_softmax(logits)?;
    let sm = tape.exp(lsm)?;
    let plogp = tape.mul(sm, lsm)?;
    let neg_h = tape.sum_last(plogp)?;
    let w = tape.constant(Tensor::new(vec![weights.len(), 1], weights.iter().map(|x| -x).collect())?);
    let h = tape.mul(neg_h, w)?;
    tape.sum(h)
}

/// One head's weighted surrogate; `None` when no row carries weight.
fn head_surrogate(
    tape: &mut Tape,
    logits: Var,
    taken: &[usize],
    old: &[f64],
    adv: &[f64],
    weights: &[f64],
    clip: f64,
) -> TensorResult<Option<(Var, Var)>> {
    if weights.iter().all(|w| *w == 0.0) {
        return Ok(None);
    }
    let lsm = tape.log_softmax(logits)?;
    let new = tape.pick(lsm, taken)?;
    Ok(Some((weighted_surrogate(tape, new, old, adv, weights, clip)?, new)))
}

fn sub_assignment(tape: &mut Tape, a: &Assignment, rows: &[usize]) -> TensorResult<Assignment> {
    Ok(Assignment {
        logits: tape.gather_rows(a.logits, rows)?,
        soft: tape.gather_rows(a.soft, rows)?,
        probs: tape.gather_rows(a.probs, rows)?,
        log_probs: tape.gather_rows(a.log_probs, rows)?,
    })
}

/// Check each component for non-finite values, naming the first offender.
fn check_finite(report: &LossReport) -> Result<(), TrainError> {
    let parts = [
        ("loss_env", report.env),
        ("loss_send", report.send),
        ("loss_recv", report.recv),
        ("loss_V", report.value),
        ("loss_comm", report.comm),
        ("loss_grp", report.group),
        ("entropy", report.entropy),
    ];
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { component: name });
        }
    }
    Ok(())
}

/// Assemble the total loss over `batch` chunks.
///
/// `p` binds the agent network and group critic, `pc` the communication
/// critic. Padded chunk positions carry zero weight everywhere.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_loss(
    tape: &mut Tape,
    model: &Model,
    p: &Bound,
    pc: &Bound,
    rollout: &Rollout,
    targets: &[TrajectoryTargets],
    batch: &[Chunk],
    s: &LossSettings,
) -> Result<(Var, LossReport), TrainError> {
    let dims = model.dims();
    let (n, od) = (dims.n_agents, dims.obs_dim);
    let fd = model.comm_critic.feature_dim;
    let net = &model.agent;
    let rows = batch.len() * n;
    let max_len = batch.iter().map(|c| c.len).max().unwrap_or(0);
    let traj_of = |c: &Chunk| &rollout.trajectories[c.traj];
    let valid = |c: &Chunk, tau: usize| tau < c.len;

    // Minibatch statistics for the environment advantage.
    let mut env_adv = Vec::new();
    for c in batch {
        for tau in 0..c.len {
            let t = c.start + tau;
            env_adv.extend_from_slice(&targets[c.traj].adv_env[t * n..(t + 1) * n]);
        }
    }
    let count = env_adv.len() as f64;
    let mean = env_adv.iter().sum::<f64>() / count;
    let std = (env_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / count).sqrt();
    let norm_adv = |a: f64| (a - mean) / (std + 1e-8);

    // Per-row send masks and denominators.
    let send_row = |c: &Chunk, tau: usize, i: usize| -> Option<(f64, f64)> {
        let t = c.start + tau;
        let tg = &targets[c.traj];
        match (tg.adv_send[t * n + i], tg.adv_recv[t * n + i]) {
            (Some(a_s), Some(a_r)) if s.counterfactual => Some((a_s, a_r)),
            (Some(_), _) => {
                let a = norm_adv(tg.adv_env[t * n + i]);
                Some((a, a))
            }
            _ => None,
        }
    };
    let mut n_send = 0usize;
    for c in batch {
        for tau in 0..c.len {
            n_send += (0..n).filter(|&i| send_row(c, tau, i).is_some()).count();
        }
    }

    // Group critic values for every valid (chunk, step).
    let mut state_rows = Vec::new();
    let mut state_idx = vec![vec![usize::MAX; max_len]; batch.len()];
    for (ci, c) in batch.iter().enumerate() {
        for tau in 0..c.len {
            state_idx[ci][tau] = state_rows.len() / GLOBAL_STATE_DIM;
            state_rows.extend_from_slice(&traj_of(c).steps[c.start + tau].state);
        }
    }
    let n_states = state_rows.len() / GLOBAL_STATE_DIM;
    let states = tape.constant(Tensor::matrix(n_states, GLOBAL_STATE_DIM, state_rows)?);
    let group_v = model.group_critic.values(tape, p, states)?;

    let fresh: Vec<bool> = batch.iter().map(|c| traj_of(c).bundles[c.bundle].fresh).collect();
    let mut hidden = Vec::with_capacity(rows * HIDDEN_DIM);
    for c in batch {
        hidden.extend_from_slice(&traj_of(c).steps[c.start].hidden);
    }
    let mut h = tape.constant(Tensor::matrix(rows, HIDDEN_DIM, hidden)?);

    let (mut l_env, mut l_send, mut l_recv, mut l_value, mut l_ent) = (None, None, None, None, None);
    let mut l_group = None;
    let mut affinity = None;
    let mut probs_used = None;
    let mut ratio_dev = 0.0;
    let self_index: Vec<usize> = (0..rows).map(|r| r % n).collect();

    for tau in 0..max_len {
        let mut obs = vec![0.0; rows * od];
        let mut mailbox = vec![0.0; rows * MSG_DIM];
        for (ci, c) in batch.iter().enumerate() {
            if valid(c, tau) {
                let st = &traj_of(c).steps[c.start + tau];
                obs[ci * n * od..(ci + 1) * n * od].copy_from_slice(&st.obs);
                mailbox[ci * n * MSG_DIM..(ci + 1) * n * MSG_DIM].copy_from_slice(&st.mailbox);
            }
        }
        let o = tape.constant(Tensor::matrix(rows, od, obs)?);
        let mb = tape.constant(Tensor::matrix(rows, MSG_DIM, mailbox)?);
        let out = net.step(tape, p, o, mb, h)?;
        h = out.hidden;

        if tau == 0 {
            let (y, pu) = replay_assignment(tape, model, p, rollout, targets, batch, &fresh, out.hidden, s, &mut l_group)?;
            affinity = Some(affinity_rows(tape, y, n)?);
            probs_used = Some(pu);
        }
        let g = affinity.expect("set at the first step");
        let pu = probs_used.expect("set at the first step");

        // Gather step data.
        let mut w_env = vec![0.0; rows];
        let mut actions = vec![0; rows];
        let mut old_a = vec![0.0; rows];
        let mut adv_a = vec![0.0; rows];
        let mut returns = vec![0.0; rows];
        let mut w_send = vec![0.0; rows];
        let mut sends = vec![0; rows];
        let mut recips = vec![0; rows];
        let mut old_s = vec![0.0; rows];
        let mut old_r = vec![0.0; rows];
        let mut adv_s = vec![0.0; rows];
        let mut adv_r = vec![0.0; rows];
        let mut v_rows = vec![0; rows];
        for (ci, c) in batch.iter().enumerate() {
            if !valid(c, tau) {
                continue;
            }
            let t = c.start + tau;
            let st = &traj_of(c).steps[t];
            let tg = &targets[c.traj];
            for i in 0..n {
                let r = ci * n + i;
                w_env[r] = 1.0 / count;
                actions[r] = st.actions[i];
                old_a[r] = st.logp_action[i];
                adv_a[r] = norm_adv(tg.adv_env[t * n + i]);
                returns[r] = tg.returns[t * n + i];
                sends[r] = usize::from(st.sends[i]);
                recips[r] = st.recipients[i];
                old_s[r] = st.logp_send[i];
                old_r[r] = st.logp_recv[i];
                v_rows[r] = state_idx[ci][tau];
                if let Some((a_s, a_r)) = send_row(c, tau, i) {
                    w_send[r] = 1.0 / n_send as f64;
                    adv_s[r] = a_s;
                    adv_r[r] = a_r;
                }
            }
        }

        if let Some((surr, new)) = head_surrogate(tape, out.heads.action, &actions, &old_a, &adv_a, &w_env, s.clip)? {
            add_into(tape, &mut l_env, surr)?;
            let new = tape.value(new).data();
            for r in 0..rows {
                if w_env[r] > 0.0 {
                    ratio_dev += ((new[r] - old_a[r]).exp() - 1.0).abs() / count;
                }
            }
        }
        if let Some((surr, _)) = head_surrogate(tape, out.heads.send, &sends, &old_s, &adv_s, &w_send, s.clip)? {
            add_into(tape, &mut l_send, surr)?;
        }
        let recv = recipient_logits(tape, out.heads.recipient, g, &self_index)?;
        if n > 1 {
            if let Some((surr, _)) = head_surrogate(tape, recv, &recips, &old_r, &adv_r, &w_send, s.clip)? {
                add_into(tape, &mut l_recv, surr)?;
            }
        }

        // Entropy bonuses over every valid row.
        // With one agent the send and recipient heads are inert.
        let multi = n > 1;
        for (logits, coef, active) in [
            (out.heads.action, s.ent_action, true),
            (out.heads.send, s.ent_send, multi),
            (recv, s.ent_recv, multi),
        ] {
            if coef > 0.0 && active {
                let w: Vec<f64> = w_env.iter().map(|x| x * coef).collect();
                let e = weighted_entropy(tape, logits, &w)?;
                add_into(tape, &mut l_ent, e)?;
            }
        }

        // Group-aware environment value.
        if w_env.iter().any(|w| *w > 0.0) {
            let v = tape.gather_rows(group_v, &v_rows)?;
            let pv = tape.mul(pu, v)?;
            let pv = tape.sum_last(pv)?;
            let mse = squared(tape, pv, &returns, Some(&w_env))?;
            add_into(tape, &mut l_value, mse)?;
        }
    }

    let steps: Vec<(usize, usize)> = batch
        .iter()
        .flat_map(|c| (c.start..c.start + c.len).map(move |t| (c.traj, t)))
        .collect();
    let view = |k: usize| (targets[k].features.as_slice(), targets[k].td_target.as_slice());
    let comm_rows = CommRows::gather(rollout, view, &steps, n, fd);
    let l_comm = comm_loss(tape, model, pc, &comm_rows)?;

    let report_base = LossReport {
        env: value_of(tape, l_env),
        send: value_of(tape, l_send),
        recv: value_of(tape, l_recv),
        value: value_of(tape, l_value),
        comm: value_of(tape, l_comm),
        group: value_of(tape, l_group),
        entropy: value_of(tape, l_ent),
        total: 0.0,
        ratio_dev,
    };
    check_finite(&report_base)?;

    let mut total = None;
    for (term, coef) in [
        (l_env, 1.0),
        (l_send, 1.0),
        (l_recv, 1.0),
        (l_value, s.value_coef),
        (l_comm, s.comm_coef),
        (l_group, s.group_coef),
        (l_ent, -1.0),
    ] {
        if let Some(v) = term {
            if coef != 0.0 {
                let v = tape.scale(v, coef)?;
                add_into(tape, &mut total, v)?;
            }
        }
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let report = LossReport {
        total: tape.value(total).item(),
        ..report_base
    };
    if !report.total.is_finite() {
        return Err(TrainError::NonFinite { component: "total" });
    }
    Ok((total, report))
}

/// Recompute the chunk-initial assignment for fresh bundles, reuse the stored
/// one otherwise, and add the grouping losses. Returns `(Y, P)` per row.
#[allow(clippy::too_many_arguments)]
fn replay_assignment(
    tape: &mut Tape,
    model: &Model,
    p: &Bound,
    rollout: &Rollout,
    targets: &[TrajectoryTargets],
    batch: &[Chunk],
    fresh: &[bool],
    hidden: Var,
    s: &LossSettings,
    l_group: &mut Option<Var>,
) -> Result<(Var, Var), TrainError> {
    let dims = model.dims();
    let (n, m) = (dims.n_agents, dims.n_groups);
    let rows = batch.len() * n;
    let bundle_of = |c: &Chunk| &rollout.trajectories[c.traj].bundles[c.bundle];
    let mut gumbel = Vec::with_capacity(rows * m);
    let mut mask = Vec::with_capacity(rows);
    let mut stored_soft = Vec::with_capacity(rows * m);
    let mut stored_probs = Vec::with_capacity(rows * m);
    for (c, &f) in batch.iter().zip(fresh) {
        let b = bundle_of(c);
        gumbel.extend_from_slice(b.gumbel.data());
        let k = if f { 0.0 } else { 1.0 };
        mask.extend(std::iter::repeat(1.0 - k).take(n));
        stored_soft.extend(b.soft.iter().map(|x| x * k));
        stored_probs.extend(b.probs.iter().map(|x| x * k));
    }
    if !fresh.iter().any(|f| *f) {
        let y = tape.constant(Tensor::matrix(rows, m, stored_soft)?);
        let pr = tape.constant(Tensor::matrix(rows, m, stored_probs)?);
        return Ok((y, pr));
    }
    let logits = model.agent.group_logits(tape, p, hidden)?;
    let a = assign(tape, logits, &Tensor::matrix(rows, m, gumbel)?, s.tau)?;
    let mask = tape.constant(Tensor::matrix(rows, 1, mask)?);
    let stored_soft = tape.constant(Tensor::matrix(rows, m, stored_soft)?);
    let stored_probs = tape.constant(Tensor::matrix(rows, m, stored_probs)?);
    let y = tape.mul(a.soft, mask)?;
    let y = tape.add(y, stored_soft)?;
    let pr = tape.mul(a.probs, mask)?;
    let pr = tape.add(pr, stored_probs)?;

    if s.grouping && m > 1 {
        let fresh_idx: Vec<usize> = (0..batch.len()).filter(|&c| fresh[c]).collect();
        let fresh_rows: Vec<usize> = fresh_idx.iter().flat_map(|&c| c * n..(c + 1) * n).collect();
        let sub = sub_assignment(tape, &a, &fresh_rows)?;
        let mut adv = Vec::with_capacity(fresh_rows.len());
        for &c in &fresh_idx {
            let chunk = &batch[c];
            let ga = targets[chunk.traj].group_adv[chunk.bundle]
                .as_ref()
                .expect("fresh bundles carry a grouping advantage");
            adv.extend_from_slice(ga);
        }
        let pg = pg_loss(tape, &sub, &adv)?;
        let pg = tape.scale(pg, 1.0 / fresh_idx.len() as f64)?;
        let bal = balance_loss(tape, sub.probs, n)?;
        let bal = tape.scale(bal, s.lambda_bal)?;
        let ent = entropy_loss(tape, &sub)?;
        let ent = tape.scale(ent, s.lambda_ent)?;
        let mut total = tape.add(pg, bal)?;
        total = tape.add(total, ent)?;

        let with_u: Vec<usize> = fresh_idx
            .iter()
            .copied()
            .filter(|&c| targets[batch[c].traj].bundle_utilities[batch[c].bundle].is_some())
            .collect();
        if s.lambda_edge != 0.0 && !with_u.is_empty() {
            let u_rows: Vec<usize> = with_u.iter().flat_map(|&c| c * n..(c + 1) * n).collect();
            let soft = tape.gather_rows(a.soft, &u_rows)?;
            let g = affinity_rows(tape, soft, n)?;
            let mut util = Vec::with_capacity(u_rows.len() * n);
            let mut valid = Vec::with_capacity(u_rows.len() * n);
            for &c in &with_u {
                let chunk = &batch[c];
                let u = targets[chunk.traj].bundle_utilities[chunk.bundle].as_ref().expect("filtered");
                util.extend_from_slice(u);
                for i in 0..n {
                    valid.extend((0..n).map(|j| if i == j { 0.0 } else { 1.0 }));
                }
            }
            let ut = Tensor::matrix(u_rows.len(), n, util)?;
            let vt = Tensor::matrix(u_rows.len(), n, valid)?;
            let edge = edge_alignment_loss(tape, g, &ut, &vt)?;
            let edge = tape.scale(edge, s.lambda_edge)?;
            total = tape.add(total, edge)?;
        }
        *l_group = Some(total);
    }
    Ok((y, pr))
}
