//! Frozen-policy evaluation and the capture metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::comm::{aggregate, Edge, MSG_DIM};
use crate::config::TrainConfig;
use crate::env::{PursuitConfig, PursuitEnv};
use crate::model::{Model, HIDDEN_DIM};
use crate::nn::RunningNormalizer;
use crate::trainer::{decide, env_seed, fmt_metric, Bundle, TrainError};

/// Capture thresholds (percent) reported as `R_k` and `TT_k`.
pub const THRESHOLDS: [usize; 2] = [50, 75];
/// `TT_k` is only reported when at least this fraction of episodes reach `k`.
pub const REACH_GATE: f64 = 0.5;
/// Mixed into the user seed so evaluation episodes never replay training ones.
const EVAL_SALT: u64 = 0xE7A1_5EED;

/// Mean over edges of `same_group`; `None` for an empty list.
pub fn ingroup_fraction(edges: &[Edge]) -> Option<f64> {
    if edges.is_empty() {
        return None;
    }
    Some(edges.iter().filter(|e| e.same_group).count() as f64 / edges.len() as f64)
}

/// What one evaluation episode produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub n_evaders: usize,
    /// Cumulative captures after each step.
    pub caught: Vec<usize>,
    pub team_return: f64,
    pub sends: usize,
    pub agent_steps: usize,
    pub edges: Vec<Edge>,
}

impl EpisodeRecord {
    pub fn total_caught(&self) -> usize {
        self.caught.last().copied().unwrap_or(0)
    }

    pub fn catch_frac(&self) -> f64 {
        self.total_caught() as f64 / self.n_evaders as f64
    }

    pub fn all_caught(&self) -> bool {
        self.total_caught() == self.n_evaders
    }

    /// First step count at which at least `pct` percent were caught.
    pub fn steps_to(&self, pct: usize) -> Option<usize> {
        let need = (pct * self.n_evaders).div_ceil(100);
        self.caught.iter().position(|&c| c >= need).map(|t| t + 1)
    }
}

/// Aggregate statistics over a set of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub catch_frac: f64,
    pub done_frac: f64,
    pub send_rate: f64,
    pub ingroup_frac: Option<f64>,
    /// Fraction of episodes reaching each threshold.
    pub reach: [f64; 2],
    /// Mean steps to each threshold over reaching episodes, gated by `REACH_GATE`.
    pub time_to: [Option<f64>; 2],
    /// Sample standard deviations; `None` with fewer than two episodes.
    pub return_std: Option<f64>,
    pub catch_std: Option<f64>,
    pub done_std: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

pub fn summarize(records: &[EpisodeRecord]) -> EvalSummary {
    let returns: Vec<f64> = records.iter().map(|r| r.team_return).collect();
    let catches: Vec<f64> = records.iter().map(EpisodeRecord::catch_frac).collect();
    let dones: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.all_caught()))).collect();
    let mut reach = [0.0; 2];
    let mut time_to = [None; 2];
    for (k, &pct) in THRESHOLDS.iter().enumerate() {
        let times: Vec<f64> = records.iter().filter_map(|r| r.steps_to(pct)).map(|t| t as f64).collect();
        reach[k] = times.len() as f64 / records.len() as f64;
        if reach[k] >= REACH_GATE {
            time_to[k] = Some(mean(&times));
        }
    }
    let sends: usize = records.iter().map(|r| r.sends).sum();
    let agent_steps: usize = records.iter().map(|r| r.agent_steps).sum();
    let edges: Vec<Edge> = records.iter().flat_map(|r| r.edges.iter().copied()).collect();
    EvalSummary {
        episodes: records.len(),
        mean_return: mean(&returns),
        catch_frac: mean(&catches),
        done_frac: mean(&dones),
        send_rate: if agent_steps == 0 { 0.0 } else { sends as f64 / agent_steps as f64 },
        ingroup_frac: ingroup_fraction(&edges),
        reach,
        time_to,
        return_std: sample_std(&returns),
        catch_std: sample_std(&catches),
        done_std: sample_std(&dones),
    }
}

/// Run one episode with an arbitrary controller, from the environment's
/// current state until it reports done.
pub fn run_scripted(env: &mut PursuitEnv, mut policy: impl FnMut(&PursuitEnv) -> Vec<usize>) -> Result<EpisodeRecord, TrainError> {
    let n = env.config().n_pursuers;
    let mut rec = EpisodeRecord {
        n_evaders: env.config().n_evaders,
        caught: Vec::new(),
        team_return: 0.0,
        sends: 0,
        agent_steps: 0,
        edges: Vec::new(),
    };
    let mut total = 0;
    loop {
        let actions = policy(env);
        let out = env.step(&actions)?;
        total += out.removed.len();
        rec.caught.push(total);
        rec.team_return += out.team_reward();
        rec.agent_steps += n;
        if out.done {
            return Ok(rec);
        }
    }
}

/// Run one episode of the learned policy with frozen parameters and
/// normalizer statistics.
pub fn run_policy_episode(
    model: &Model,
    normalizer: &RunningNormalizer,
    env: &mut PursuitEnv,
    macro_steps: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord, TrainError> {
    let n = env.config().n_pursuers;
    let mut hidden = vec![0.0; n * HIDDEN_DIM];
    let mut mailbox = vec![0.0; n * MSG_DIM];
    let mut bundle: Option<Bundle> = None;
    let mut rec = EpisodeRecord {
        n_evaders: env.config().n_evaders,
        caught: Vec::new(),
        team_return: 0.0,
        sends: 0,
        agent_steps: 0,
        edges: Vec::new(),
    };
    let mut total = 0;
    for t in 0.. {
        let obs: Vec<f64> = env.observations().iter().flat_map(|o| normalizer.normalize(o)).collect();
        let reuse = if t % macro_steps == 0 { None } else { bundle.as_ref() };
        let d = decide(model, &obs, &mailbox, &hidden, reuse, t, tau, rng)?;
        if let Some(b) = d.bundle.clone() {
            bundle = Some(b);
        }
        let labels = &bundle.as_ref().expect("a bundle is always active").labels;
        let targets: Vec<Option<usize>> = (0..n).map(|i| d.sends[i].then_some(d.recipients[i])).collect();
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(j) = *tgt {
                rec.edges.push(Edge {
                    t,
                    sender: i,
                    recipient: j,
                    same_group: labels[i] == labels[j],
                });
            }
        }
        rec.sends += targets.iter().flatten().count();
        let messages: Vec<Vec<f64>> = d.z_msg.chunks(MSG_DIM).map(<[f64]>::to_vec).collect();
        mailbox = aggregate(&targets, &messages).boxes.concat();
        hidden = d.hidden;
        let out = env.step(&d.actions)?;
        total += out.removed.len();
        rec.caught.push(total);
        rec.team_return += out.team_reward();
        rec.agent_steps += n;
        if out.done {
            break;
        }
    }
    Ok(rec)
}

/// Evaluation environment and policy stream for seed index `k`.
fn eval_streams(env: &PursuitConfig, seed: u64, k: usize) -> (PursuitConfig, ChaCha8Rng) {
    let mut cfg = env.clone();
    cfg.seed = env_seed(seed ^ EVAL_SALT, k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    (cfg, rng)
}

/// One episode per evaluation seed at the final temperature.
pub fn evaluate(
    model: &Model,
    normalizer: &RunningNormalizer,
    config: &TrainConfig,
    seed: u64,
    n_seeds: usize,
) -> Result<Vec<EpisodeRecord>, TrainError> {
    (0..n_seeds)
        .map(|k| {
            let (cfg, mut rng) = eval_streams(&config.env, seed, k);
            let mut env = PursuitEnv::new(cfg)?;
            run_policy_episode(model, normalizer, &mut env, config.macro_steps, config.tau_end, &mut rng)
        })
        .collect()
}

pub const EVAL_HEADER: &str = "seed,update,env_steps,mean_return,catch_frac,send_rate,ingroup_frac,loss_env,loss_send,loss_recv,loss_V,loss_comm,loss_grp,tau,lambda_edge,done_frac,R50,R75,TT50,TT75,mean_return_std,catch_frac_std,done_frac_std";

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "N/A".to_string(), fmt_metric)
}

fn std_cell(x: Option<f64>) -> String {
    x.map(fmt_metric).unwrap_or_default()
}

/// Per-seed rows followed by a `mean` summary row.
///
/// `source` labels the checkpoint's `(update, env_steps)` when known.
pub fn eval_csv(records: &[EpisodeRecord], tau: f64, lambda_edge: f64, source: Option<(usize, usize)>) -> String {
    let (update, steps) = source.map_or(("N/A".to_string(), "N/A".to_string()), |(u, s)| (u.to_string(), s.to_string()));
    let row = |label: String, s: &EvalSummary, with_std: bool| -> String {
        let mut cells = vec![
            label,
            update.clone(),
            steps.clone(),
            fmt_metric(s.mean_return),
            fmt_metric(s.catch_frac),
            fmt_metric(s.send_rate),
            opt(s.ingroup_frac),
        ];
        cells.extend(std::iter::repeat("N/A".to_string()).take(6));
        cells.push(fmt_metric(tau));
        cells.push(fmt_metric(lambda_edge));
        cells.push(fmt_metric(s.done_frac));
        cells.extend(s.reach.iter().map(|r| fmt_metric(*r)));
        cells.extend(s.time_to.iter().map(|t| opt(*t)));
        for v in [s.return_std, s.catch_std, s.done_std] {
            cells.push(if with_std { std_cell(v) } else { String::new() });
        }
        cells.join(",")
    };
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for (k, r) in records.iter().enumerate() {
        out.push_str(&row(k.to_string(), &summarize(std::slice::from_ref(r)), false));
        out.push('\n');
    }
    out.push_str(&row("mean".to_string(), &summarize(records), true));
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n_evaders: usize, caught: Vec<usize>) -> EpisodeRecord {
        EpisodeRecord {
            n_evaders,
            caught,
            team_return: 0.0,
            sends: 0,
            agent_steps: 0,
            edges: Vec::new(),
        }
    }

    #[test]
    fn steps_to_threshold_rounds_up() {
        let r = record(4, vec![0, 1, 1, 2, 3]);
        assert_eq!(r.steps_to(50), Some(4));
        assert_eq!(r.steps_to(75), Some(5));
        assert_eq!(r.steps_to(100), None);
    }

    #[test]
    fn time_to_is_gated_by_reach() {
        let recs = vec![record(2, vec![1]), record(2, vec![0]), record(2, vec![0])];
        let s = summarize(&recs);
        assert!((s.reach[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.time_to[0], None);
    }

    #[test]
    fn done_implies_full_catch() {
        let s = summarize(&[record(3, vec![1, 3]), record(3, vec![3])]);
        assert_eq!(s.done_frac, 1.0);
        assert_eq!(s.catch_frac, 1.0);
    }

    #[test]
    fn empty_edges_are_undefined() {
        assert_eq!(ingroup_fraction(&[]), None);
    }

    #[test]
    fn single_seed_csv_has_empty_std() {
        let csv = eval_csv(&[record(2, vec![2])], 0.5, 1.0, None);
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("mean,"));
        assert!(last.ends_with(",,,"));
    }
}
