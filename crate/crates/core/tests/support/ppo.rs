//! Trainer fixtures and an independently coded recurrent PPO loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scout_core::autodiff::gradcheck::{check_params, GradReport};
use scout_core::autodiff::{ParameterSet, Tape, Tensor, TensorError};
use scout_core::comm::BIAS_EPS;
use scout_core::config::TrainConfig;
use scout_core::model::Model;
use scout_core::trainer::{chunks, minibatch_loss, Chunk, LossReport, LossSettings, Prepared, TrainError, Trainer};

pub fn config(extra: &str) -> TrainConfig {
    let base = "env.map_size = 7\nenv.n_pursuers = 3\nenv.n_evaders = 2\nM = 2\nK = 3\nhorizon = 5\ntotal_steps = 50\n";
    let mut c = TrainConfig::default();
    c.apply_text(base).unwrap();
    c.apply_text(extra).unwrap();
    c.validate().unwrap();
    c
}

pub fn prepared(c: TrainConfig) -> (Trainer, Prepared) {
    let mut trainer = Trainer::new(c).unwrap();
    let prep = trainer.prepare().unwrap();
    (trainer, prep)
}

pub fn evaluate(model: &Model, params: &ParameterSet, prep: &Prepared, batch: &[Chunk], s: &LossSettings) -> (f64, LossReport) {
    let mut t = Tape::new();
    let p = params.bind_frozen(&mut t);
    let pc = model.comm_params.bind_frozen(&mut t);
    let (loss, report) = minibatch_loss(&mut t, model, &p, &pc, &prep.rollout, &prep.targets, batch, s).unwrap();
    (t.value(loss).item(), report)
}

pub fn tensor_err(e: TrainError) -> TensorError {
    match e {
        TrainError::Tensor(t) => t,
        other => panic!("unexpected error {other}"),
    }
}

/// Finite-difference reports for the assembled loss on a 3-agent, 2-group,
/// 5-step rollout: agent parameters, then communication-critic parameters.
pub fn assembled_gradcheck() -> (GradReport, GradReport) {
    // Three agents, two groups, five steps; full edge weight and a moderate
    // temperature so every grouping term is live.
    let (trainer, prep) = prepared(config(""));
    let settings = LossSettings {
        tau: 1.0,
        lambda_edge: 1.0,
        ..prep.settings
    };
    let all = chunks(&prep.rollout);
    assert_eq!(prep.rollout.n_steps(), 5);
    let model = &trainer.model;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut names: Vec<(bool, String)> = model
        .params
        .names()
        .map(|n| (false, n.to_string()))
        .chain(model.comm_params.names().map(|n| (true, n.to_string())))
        .collect();
    names.shuffle(&mut rng);
    let pick = |set: &ParameterSet, name: &str, rng: &mut ChaCha8Rng| {
        (name.to_string(), rng.gen_range(0..set.get(name).unwrap().len()))
    };
    let mut agent = Vec::new();
    let mut comm = Vec::new();
    for (is_comm, name) in names.iter().take(20) {
        if *is_comm {
            comm.push(pick(&model.comm_params, name, &mut rng));
        } else {
            agent.push(pick(&model.params, name, &mut rng));
        }
    }
    let rep = check_params(
        &model.params,
        |t, p| {
            let pc = model.comm_params.bind_frozen(t);
            let (loss, _) = minibatch_loss(t, model, p, &pc, &prep.rollout, &prep.targets, &all, &settings).map_err(tensor_err)?;
            Ok(loss)
        },
        &agent,
        1e-6,
    )
    .unwrap();
    let rep_c = check_params(
        &model.comm_params,
        |t, pc| {
            let p = model.params.bind_frozen(t);
            let (loss, _) = minibatch_loss(t, model, &p, pc, &prep.rollout, &prep.targets, &all, &settings).map_err(tensor_err)?;
            Ok(loss)
        },
        &comm,
        1e-6,
    )
    .unwrap();
    assert_eq!(rep.checked + rep_c.checked, 20);
    (rep, rep_c)
}

struct Plain<'a>(&'a ParameterSet);

impl Plain<'_> {
    fn w(&self, name: &str) -> &Tensor {
        self.0.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    /// `x W + b` with explicit loops.
    fn affine(&self, x: &[f64], w: &str, b: Option<&str>) -> Vec<f64> {
        let w = self.w(w);
        let (r, c) = w.rows_cols();
        assert_eq!(x.len(), r);
        let mut out = match b {
            Some(b) => self.w(b).data().to_vec(),
            None => vec![0.0; c],
        };
        for i in 0..r {
            for j in 0..c {
                out[j] += x[i] * w.data()[i * c + j];
            }
        }
        out
    }

    fn gru(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = h.len();
        let gi = self.affine(x, "actor.backbone.gru.w_i", Some("actor.backbone.gru.b_i"));
        let gh = self.affine(h, "actor.backbone.gru.w_h", Some("actor.backbone.gru.b_h"));
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        (0..hd)
            .map(|k| {
                let r = sig(gi[k] + gh[k]);
                let z = sig(gi[hd + k] + gh[hd + k]);
                let n = (gi[2 * hd + k] + r * gh[2 * hd + k]).tanh();
                (1.0 - z) * n + z * h[k]
            })
            .collect()
    }

    fn step(&self, obs: &[f64], mailbox: &[f64], h: &[f64]) -> Vec<f64> {
        let a = self.affine(obs, "actor.backbone.embed.w_obs", Some("actor.backbone.embed.b"));
        let b = self.affine(mailbox, "actor.backbone.embed.w_mailbox", None);
        let e: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y).max(0.0)).collect();
        self.gru(&e, h)
    }

    fn value(&self, state: &[f64]) -> f64 {
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let h = relu(self.affine(state, "critic.group.l1.w_state", Some("critic.group.l1.b")));
        let h = relu(self.affine(&h, "critic.group.l2.w", Some("critic.group.l2.b")));
        self.affine(&h, "critic.group.l3.w", Some("critic.group.l3.b"))[0]
    }
}

/// Log-probabilities over the entries of `allowed`, minus infinity elsewhere.
fn log_softmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = (0..logits.len()).filter(|&k| allowed(k)).map(|k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = (0..logits.len()).filter(|&k| allowed(k)).map(|k| (logits[k] - max).exp()).sum();
    (0..logits.len())
        .map(|k| if allowed(k) { logits[k] - max - z.ln() } else { f64::NEG_INFINITY })
        .collect()
}

fn entropy(lp: &[f64]) -> f64 {
    -lp.iter().filter(|l| l.is_finite()).map(|l| l.exp() * l).sum::<f64>()
}

fn clipped(new: f64, old: f64, adv: f64, eps: f64) -> f64 {
    let rho = (new - old).exp();
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

pub fn plain_ppo_loss(params: &ParameterSet, prep: &Prepared, batch: &[Chunk], s: &LossSettings, n: usize) -> f64 {
    let net = Plain(params);
    let mut env_adv = Vec::new();
    let mut n_send = 0;
    for c in batch {
        for t in c.start..c.start + c.len {
            for i in 0..n {
                env_adv.push(prep.targets[c.traj].adv_env[t * n + i]);
                n_send += usize::from(prep.targets[c.traj].adv_send[t * n + i].is_some());
            }
        }
    }
    let count = env_adv.len() as f64;
    let mean = env_adv.iter().sum::<f64>() / count;
    let std = (env_adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / count).sqrt();

    let (mut policy, mut send, mut recv, mut value, mut ent) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let bias = (1.0 + BIAS_EPS).ln();
    for c in batch {
        let traj = &prep.rollout.trajectories[c.traj];
        let tg = &prep.targets[c.traj];
        let od = traj.steps[0].obs.len() / n;
        let hd = traj.steps[0].hidden.len() / n;
        let md = traj.steps[0].mailbox.len() / n;
        let mut h: Vec<Vec<f64>> = (0..n).map(|i| traj.steps[c.start].hidden[i * hd..(i + 1) * hd].to_vec()).collect();
        for t in c.start..c.start + c.len {
            let st = &traj.steps[t];
            let v = net.value(&st.state);
            for i in 0..n {
                h[i] = net.step(&st.obs[i * od..(i + 1) * od], &st.mailbox[i * md..(i + 1) * md], &h[i]);
                let row = t * n + i;
                let la = log_softmax(&net.affine(&h[i], "actor.heads.action.w", Some("actor.heads.action.b")), |_| true);
                let ls = log_softmax(&net.affine(&h[i], "actor.heads.send.w", Some("actor.heads.send.b")), |_| true);
                let raw = net.affine(&h[i], "actor.heads.recipient.w", Some("actor.heads.recipient.b"));
                let biased: Vec<f64> = raw.iter().map(|x| x + bias).collect();
                let lr = log_softmax(&biased, |j| j != i);

                let a = (tg.adv_env[row] - mean) / (std + 1e-8);
                policy += clipped(la[st.actions[i]], st.logp_action[i], a, s.clip) / count;
                if let (Some(a_s), Some(a_r)) = (tg.adv_send[row], tg.adv_recv[row]) {
                    send += clipped(ls[usize::from(st.sends[i])], st.logp_send[i], a_s, s.clip) / n_send as f64;
                    recv += clipped(lr[st.recipients[i]], st.logp_recv[i], a_r, s.clip) / n_send as f64;
                }
                ent += (s.ent_action * entropy(&la) + s.ent_send * entropy(&ls) + s.ent_recv * entropy(&lr)) / count;
                value += (v - tg.returns[row]).powi(2) / count;
            }
        }
    }
    -policy - send - recv + s.value_coef * value - ent
}

/// Absolute gap between the trainer loss and the independent recurrent PPO
/// loss with communication and grouping weights off and one group, at the
/// rollout parameters and at perturbed parameters.
pub fn plain_ppo_gap() -> (f64, f64) {
    let c = config("M = 1\nc_comm = 0\nc_group = 0\nhorizon = 24\nK = 4\n");
    let (trainer, prep) = prepared(c);
    let n = 3;
    let all = chunks(&prep.rollout);
    assert!(prep.targets.iter().any(|t| t.adv_send.iter().any(Option::is_some)));
    let (got, report) = evaluate(&trainer.model, &trainer.model.params, &prep, &all, &prep.settings);
    assert_eq!(report.group, 0.0);
    let want = plain_ppo_loss(&trainer.model.params, &prep, &all, &prep.settings, n);
    let at_rollout = (got - want).abs();

    // Away from the rollout parameters so the ratios leave 1.
    let mut moved = trainer.model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = moved.names().map(str::to_string).collect();
    for name in names {
        for x in moved.get_mut(&name).unwrap().data_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let half = &all[..all.len() / 2];
    let (got, _) = evaluate(&trainer.model, &moved, &prep, half, &prep.settings);
    let want = plain_ppo_loss(&moved, &prep, half, &prep.settings, n);
    (at_rollout, (got - want).abs())
}
