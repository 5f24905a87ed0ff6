//! Environment interaction with frozen parameters.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_sum_exp, softmax_row, Tape, Tensor};
use crate::comm::{aggregate, recipient_logits, sample_categorical, Edge, MSG_DIM};
use crate::env::{frame_line, PursuitEnv};
use crate::grouping::{affinity_rows, assign, hard_label, sample_gumbel};
use crate::model::{Model, HIDDEN_DIM};
use crate::nn::RunningNormalizer;

use super::TrainError;

/// Assignment state held fixed across one macro-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    /// Rollout step at which this bundle became active.
    pub start: usize,
    /// Sampled inside this rollout (its descriptors can be replayed).
    pub fresh: bool,
    pub gumbel: Tensor,
    /// `[N * M]` Gumbel-softmax sample.
    pub soft: Vec<f64>,
    /// `[N * M]` tempered softmax.
    pub probs: Vec<f64>,
    /// `[N * N]` affinity.
    pub affinity: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Everything recorded for one environment step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// `[N * obs_dim]`, normalized with the statistics in force at this step.
    pub obs: Vec<f64>,
    /// `[N * MSG_DIM]` mailbox read at this step.
    pub mailbox: Vec<f64>,
    /// `[N * HIDDEN_DIM]` recurrent state entering this step.
    pub hidden: Vec<f64>,
    /// `[N * MSG_DIM]` message descriptors (the message content if sent).
    pub z_msg: Vec<f64>,
    pub actions: Vec<usize>,
    pub sends: Vec<bool>,
    pub recipients: Vec<usize>,
    pub logp_action: Vec<f64>,
    pub logp_send: Vec<f64>,
    pub logp_recv: Vec<f64>,
    /// Shared team reward.
    pub reward: f64,
    pub done: bool,
    /// Ended because every evader was caught.
    pub terminal: bool,
    /// Global state before acting.
    pub state: Vec<f64>,
    /// Global state reached when the episode ended here.
    pub final_state: Option<Vec<f64>>,
    pub bundle: usize,
    /// Attention weights of the mailboxes delivered after this step.
    pub incoming: Vec<Vec<(usize, f64)>>,
}

/// One environment's slice of a rollout.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub bundles: Vec<Bundle>,
    /// State after the final step, for bootstrapping.
    pub last_state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub env: usize,
    pub team_return: f64,
    pub caught: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub trajectories: Vec<Trajectory>,
    pub episodes: Vec<EpisodeSummary>,
    pub edges: Vec<Edge>,
    pub frames: Vec<String>,
}

impl Rollout {
    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn send_rate(&self) -> f64 {
        let (mut sent, mut total) = (0usize, 0usize);
        for tr in &self.trajectories {
            for s in &tr.steps {
                sent += s.sends.iter().filter(|b| **b).count();
                total += s.sends.len();
            }
        }
        if total == 0 {
            0.0
        } else {
            sent as f64 / total as f64
        }
    }
}

/// Per-environment state carried between rollouts.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub env: PursuitEnv,
    pub hidden: Vec<f64>,
    pub mailbox: Vec<f64>,
    pub episode_step: usize,
    pub bundle: Option<Bundle>,
    pub episode_return: f64,
    pub episode_caught: usize,
}

impl EnvSlot {
    pub fn new(env: PursuitEnv) -> Self {
        let n = env.config().n_pursuers;
        Self {
            env,
            hidden: vec![0.0; n * HIDDEN_DIM],
            mailbox: vec![0.0; n * MSG_DIM],
            episode_step: 0,
            bundle: None,
            episode_return: 0.0,
            episode_caught: 0,
        }
    }

    fn reset_episode(&mut self) -> Result<(), TrainError> {
        self.env.reset()?;
        self.hidden.iter_mut().for_each(|x| *x = 0.0);
        self.mailbox.iter_mut().for_each(|x| *x = 0.0);
        self.episode_step = 0;
        self.bundle = None;
        self.episode_return = 0.0;
        self.episode_caught = 0;
        Ok(())
    }
}

/// Decisions of all agents at one step.
#[derive(Debug, Clone)]
pub struct Decision {
    pub hidden: Vec<f64>,
    pub z_msg: Vec<f64>,
    pub actions: Vec<usize>,
    pub sends: Vec<bool>,
    pub recipients: Vec<usize>,
    pub logp_action: Vec<f64>,
    pub logp_send: Vec<f64>,
    pub logp_recv: Vec<f64>,
    /// Newly sampled bundle, when this step opened a macro-step.
    pub bundle: Option<Bundle>,
}

/// Sample from `softmax(logits)` unless `forced`; returns the choice and its log-probability.
fn sample_head(logits: &[f64], forced: Option<usize>, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let k = forced.unwrap_or_else(|| {
        let mut probs = vec![0.0; logits.len()];
        softmax_row(logits, &mut probs);
        sample_categorical(&probs, rng)
    });
    (k, logits[k] - log_sum_exp(logits))
}

/// Run the shared policy for every agent of one environment.
///
/// Draw order: Gumbel noise (when `bundle` is `None`), then per agent the
/// action, send bit and recipient.
#[allow(clippy::too_many_arguments)]
pub fn decide(
    model: &Model,
    obs: &[f64],
    mailbox: &[f64],
    hidden: &[f64],
    bundle: Option<&Bundle>,
    start: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Decision, TrainError> {
    let dims = model.dims();
    let (n, m) = (dims.n_agents, dims.n_groups);
    let net = &model.agent;
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let o = tape.constant(Tensor::matrix(n, dims.obs_dim, obs.to_vec())?);
    let mb = tape.constant(Tensor::matrix(n, MSG_DIM, mailbox.to_vec())?);
    let h0 = tape.constant(Tensor::matrix(n, HIDDEN_DIM, hidden.to_vec())?);
    let out = net.step(&mut tape, &p, o, mb, h0)?;
    let z_msg = net.message(&mut tape, &p, out.hidden)?;

    let (new_bundle, affinity) = match bundle {
        Some(b) => (None, tape.constant(Tensor::matrix(n, n, b.affinity.clone())?)),
        None => {
            let logits = net.group_logits(&mut tape, &p, out.hidden)?;
            let gumbel = sample_gumbel(rng, n, m);
            let a = assign(&mut tape, logits, &gumbel, tau)?;
            let g = affinity_rows(&mut tape, a.soft, n)?;
            let probs = tape.value(a.probs).data().to_vec();
            let labels = probs.chunks(m).map(hard_label).collect();
            let b = Bundle {
                start,
                fresh: true,
                gumbel,
                soft: tape.value(a.soft).data().to_vec(),
                probs,
                affinity: tape.value(g).data().to_vec(),
                labels,
            };
            (Some(b), g)
        }
    };
    let self_index: Vec<usize> = (0..n).collect();
    let recv = recipient_logits(&mut tape, out.heads.recipient, affinity, &self_index)?;

    let act_logits = tape.value(out.heads.action).clone();
    let send_logits = tape.value(out.heads.send).clone();
    let recv_logits = tape.value(recv).clone();
    let mut d = Decision {
        hidden: tape.value(out.hidden).data().to_vec(),
        z_msg: tape.value(z_msg).data().to_vec(),
        actions: Vec::with_capacity(n),
        sends: Vec::with_capacity(n),
        recipients: Vec::with_capacity(n),
        logp_action: Vec::with_capacity(n),
        logp_send: Vec::with_capacity(n),
        logp_recv: Vec::with_capacity(n),
        bundle: new_bundle,
    };
    for i in 0..n {
        let (a, lp) = sample_head(act_logits.row(i), None, rng);
        d.actions.push(a);
        d.logp_action.push(lp);
        // With a single agent there is nobody to address.
        let forced = (n == 1).then_some(0);
        let (c, lp) = sample_head(send_logits.row(i), forced, rng);
        d.sends.push(c == 1);
        d.logp_send.push(lp);
        let (r, lp) = sample_head(recv_logits.row(i), None, rng);
        d.recipients.push(r);
        d.logp_recv.push(lp);
    }
    Ok(d)
}

/// Collect `horizon` steps from every slot.
#[allow(clippy::too_many_arguments)]
pub fn collect(
    model: &Model,
    slots: &mut [EnvSlot],
    normalizer: &mut RunningNormalizer,
    horizon: usize,
    macro_steps: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
    record_frames: bool,
) -> Result<Rollout, TrainError> {
    let mut out = Rollout::default();
    let mut trajs: Vec<Trajectory> = slots
        .iter_mut()
        .map(|slot| {
            let mut bundles = Vec::new();
            if let Some(b) = slot.bundle.as_mut() {
                b.start = 0;
                b.fresh = false;
                bundles.push(b.clone());
            }
            Trajectory {
                steps: Vec::with_capacity(horizon),
                bundles,
                last_state: Vec::new(),
            }
        })
        .collect();
    let n = model.dims().n_agents;
    for t in 0..horizon {
        for (e, slot) in slots.iter_mut().enumerate() {
            let traj = &mut trajs[e];
            let raw = slot.env.observations();
            let mut obs = Vec::with_capacity(n * normalizer.dim());
            for o in &raw {
                normalizer.update(o);
            }
            for o in &raw {
                obs.extend(normalizer.normalize(o));
            }
            let state = slot.env.global_state();
            let reuse = if slot.episode_step % macro_steps == 0 {
                None
            } else {
                slot.bundle.as_ref()
            };
            let d = decide(model, &obs, &slot.mailbox, &slot.hidden, reuse, t, tau, rng)?;
            if let Some(b) = &d.bundle {
                traj.bundles.push(b.clone());
                slot.bundle = Some(b.clone());
            }
            let bundle = slot.bundle.as_ref().expect("a bundle is always active");
            let targets: Vec<Option<usize>> = (0..n)
                .map(|i| d.sends[i].then_some(d.recipients[i]))
                .collect();
            let messages: Vec<Vec<f64>> = d.z_msg.chunks(MSG_DIM).map(<[f64]>::to_vec).collect();
            let boxes = aggregate(&targets, &messages);
            for (i, tgt) in targets.iter().enumerate() {
                if let Some(j) = *tgt {
                    out.edges.push(Edge {
                        t: slot.episode_step,
                        sender: i,
                        recipient: j,
                        same_group: bundle.labels[i] == bundle.labels[j],
                    });
                }
            }
            let outcome = slot.env.step(&d.actions)?;
            let reward = outcome.team_reward();
            slot.episode_return += reward;
            slot.episode_caught += outcome.removed.len();
            slot.episode_step += 1;
            if record_frames && e == 0 {
                out.frames.push(frame_line(slot.env.state(), outcome.removed.len()));
            }
            let terminal = outcome.done && slot.env.state().alive_evaders() == 0;
            let final_state = outcome.done.then(|| slot.env.global_state());
            traj.steps.push(StepRecord {
                obs,
                mailbox: std::mem::take(&mut slot.mailbox),
                hidden: std::mem::replace(&mut slot.hidden, d.hidden),
                z_msg: d.z_msg,
                actions: d.actions,
                sends: d.sends,
                recipients: d.recipients,
                logp_action: d.logp_action,
                logp_send: d.logp_send,
                logp_recv: d.logp_recv,
                reward,
                done: outcome.done,
                terminal,
                state,
                final_state,
                bundle: traj.bundles.len() - 1,
                incoming: boxes.incoming,
            });
            slot.mailbox = boxes.boxes.concat();
            if outcome.done {
                out.episodes.push(EpisodeSummary {
                    env: e,
                    team_return: slot.episode_return,
                    caught: slot.episode_caught,
                    length: slot.episode_step,
                });
                slot.reset_episode()?;
            }
        }
    }
    for (traj, slot) in trajs.iter_mut().zip(slots.iter()) {
        traj.last_state = slot.env.global_state();
    }
    out.trajectories = trajs;
    Ok(out)
}
