//! On-policy training: rollouts, critic updates, counterfactual advantages
//! and the assembled PPO objective.

pub mod loss;
pub mod prep;
pub mod rollout;

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    read_records, write_records, CheckpointError, ParamError, ParameterSet, Tape, Tensor, TensorError,
};
use crate::comm::CommError;
use crate::config::{ConfigError, TrainConfig, Variant};
use crate::env::{EnvError, PursuitEnv};
use crate::eval::ingroup_fraction;
use crate::model::{Model, ModelDims};
use crate::nn::RunningNormalizer;

pub use loss::{chunks, comm_loss, minibatch_loss, ppo_surrogate, Chunk, CommRows, LossReport, LossSettings};
pub use prep::{critic_targets, finish_targets, PrepSettings, TrajectoryTargets};
pub use rollout::{collect, decide, Bundle, EnvSlot, EpisodeSummary, Rollout, StepRecord, Trajectory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite value in {component}")]
    NonFinite { component: &'static str },
}

/// Adam moment decay rates and epsilon.
const ADAM: (f64, f64, f64) = (0.9, 0.999, 1e-8);
/// Completed episodes averaged into the reported return.
pub const RETURN_WINDOW: usize = 10;

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Rollout = 2,
    Update = 3,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed of environment `index` for a run seed.
pub fn env_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMetrics {
    pub update: usize,
    pub env_steps: usize,
    /// Mean return of the last completed episodes; NaN before any finishes.
    pub mean_return: f64,
    pub catch_frac: f64,
    pub send_rate: f64,
    pub ingroup_frac: Option<f64>,
    pub losses: LossReport,
    pub tau: f64,
    pub lambda_edge: f64,
    /// Optimizer steps skipped by the divergence guard.
    pub skipped: bool,
}

pub const METRICS_HEADER: &str = "update,env_steps,mean_return,catch_frac,send_rate,ingroup_frac,loss_env,loss_send,loss_recv,loss_V,loss_comm,loss_grp,tau,lambda_edge";

/// `N/A` for undefined values, shortest round-trip formatting otherwise.
pub fn fmt_metric(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "N/A".to_string()
    }
}

impl UpdateMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        [
            self.update.to_string(),
            self.env_steps.to_string(),
            fmt_metric(self.mean_return),
            fmt_metric(self.catch_frac),
            fmt_metric(self.send_rate),
            fmt_metric(self.ingroup_frac.unwrap_or(f64::NAN)),
            fmt_metric(l.env),
            fmt_metric(l.send),
            fmt_metric(l.recv),
            fmt_metric(l.value),
            fmt_metric(l.comm),
            fmt_metric(l.group),
            fmt_metric(self.tau),
            fmt_metric(self.lambda_edge),
        ]
        .join(",")
    }
}

/// Output of one update beyond the metrics row.
#[derive(Debug, Clone)]
pub struct UpdateOutput {
    pub metrics: UpdateMetrics,
    pub episodes: Vec<EpisodeSummary>,
    pub frames: Vec<String>,
    pub edges: Vec<crate::comm::Edge>,
}

/// One rollout with its targets, ready for the PPO epochs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub rollout: Rollout,
    pub targets: Vec<TrajectoryTargets>,
    pub settings: LossSettings,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub normalizer: RunningNormalizer,
    slots: Vec<EnvSlot>,
    rollout_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    env_steps: usize,
    updates: usize,
    recent: VecDeque<EpisodeSummary>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let dims = model_dims(&config);
        let model = Model::new(dims, &mut stream_rng(config.seed, Stream::Init))?;
        let slots = (0..config.n_envs)
            .map(|e| {
                let mut env_cfg = config.env.clone();
                env_cfg.seed = env_seed(config.seed, e);
                Ok(EnvSlot::new(PursuitEnv::new(env_cfg)?))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self {
            normalizer: RunningNormalizer::new(dims.obs_dim),
            model,
            slots,
            rollout_rng: stream_rng(config.seed, Stream::Rollout),
            update_rng: stream_rng(config.seed, Stream::Update),
            env_steps: 0,
            updates: 0,
            recent: VecDeque::with_capacity(RETURN_WINDOW),
            config,
        })
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Updates needed to reach `total_steps`.
    pub fn planned_updates(&self) -> usize {
        let per = self.config.horizon * self.config.n_envs;
        self.config.total_steps.div_ceil(per)
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.config.total_steps
    }

    pub fn loss_settings(&self, tau: f64, lambda_edge: f64) -> LossSettings {
        let c = &self.config;
        LossSettings {
            clip: c.clip,
            tau,
            value_coef: c.value_coef,
            comm_coef: c.comm_coef,
            group_coef: c.group_coef,
            lambda_bal: c.lambda_bal,
            lambda_ent: c.lambda_ent,
            lambda_edge,
            ent_action: c.ent_action,
            ent_send: c.ent_send,
            ent_recv: c.ent_recv,
            counterfactual: c.variant != Variant::NoCounterfactual,
            grouping: c.variant != Variant::NoGrouping,
        }
    }

    /// Collect a rollout, take the communication-critic TD step and compute
    /// every advantage the PPO epochs need.
    pub fn prepare(&mut self) -> Result<Prepared, TrainError> {
        let c = self.config.clone();
        let tau = c.tau_at(self.env_steps);
        let lambda_edge = c.lambda_edge_at(self.env_steps);
        let rollout = collect(
            &self.model,
            &mut self.slots,
            &mut self.normalizer,
            c.horizon,
            c.macro_steps,
            tau,
            &mut self.rollout_rng,
            c.frames,
        )?;
        self.env_steps += rollout.n_steps();
        self.updates += 1;
        for ep in &rollout.episodes {
            if self.recent.len() == RETURN_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back(*ep);
        }

        let prep = PrepSettings {
            gamma: c.gamma,
            gae_lambda: c.gae_lambda,
        };
        let critic = critic_targets(&self.model, &rollout, prep)?;
        self.comm_td_step(&rollout, &critic)?;
        let targets = finish_targets(&self.model, &rollout, critic, prep, &mut self.update_rng)?;
        Ok(Prepared {
            rollout,
            targets,
            settings: self.loss_settings(tau, lambda_edge),
        })
    }

    /// Collect one rollout and train on it.
    pub fn run_update(&mut self) -> Result<UpdateOutput, TrainError> {
        let c = self.config.clone();
        let Prepared {
            rollout,
            targets,
            settings,
        } = self.prepare()?;
        let (tau, lambda_edge) = (settings.tau, settings.lambda_edge);
        let (losses, skipped) = self.optimize(&rollout, &targets, &settings)?;

        let n_evaders = c.env.n_evaders as f64;
        let (mean_return, catch_frac) = if self.recent.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let k = self.recent.len() as f64;
            (
                self.recent.iter().map(|e| e.team_return).sum::<f64>() / k,
                self.recent.iter().map(|e| e.caught as f64 / n_evaders).sum::<f64>() / k,
            )
        };
        let metrics = UpdateMetrics {
            update: self.updates,
            env_steps: self.env_steps,
            mean_return,
            catch_frac,
            send_rate: rollout.send_rate(),
            ingroup_frac: ingroup_fraction(&rollout.edges),
            losses,
            tau,
            lambda_edge,
            skipped,
        };
        Ok(UpdateOutput {
            metrics,
            episodes: rollout.episodes,
            frames: rollout.frames,
            edges: rollout.edges,
        })
    }

    /// One optimizer step of the communication critic on its TD loss alone.
    fn comm_td_step(&mut self, rollout: &Rollout, critic: &[(Vec<f64>, Vec<Option<f64>>)]) -> Result<(), TrainError> {
        let n = self.model.dims().n_agents;
        let fd = self.model.comm_critic.feature_dim;
        let steps: Vec<(usize, usize)> = rollout
            .trajectories
            .iter()
            .enumerate()
            .flat_map(|(k, tr)| (0..tr.steps.len()).map(move |t| (k, t)))
            .collect();
        let rows = CommRows::gather(rollout, |k| (critic[k].0.as_slice(), critic[k].1.as_slice()), &steps, n, fd);
        let mut tape = Tape::new();
        let pc = self.model.comm_params.bind(&mut tape);
        let Some(loss) = comm_loss(&mut tape, &self.model, &pc, &rows)? else {
            return Ok(());
        };
        if !tape.value(loss).item().is_finite() {
            return Err(TrainError::NonFinite { component: "loss_comm" });
        }
        tape.backward(loss)?;
        let m = &mut self.model;
        m.comm_params.zero_grad();
        m.comm_params.accumulate_grads(&tape, &pc);
        m.comm_params.clip_grad_norm(self.config.max_grad_norm);
        m.comm_params.adam_step(self.config.lr, ADAM.0, ADAM.1, ADAM.2)?;
        m.comm_target.polyak_from(&m.comm_params, self.config.polyak)?;
        Ok(())
    }

    /// PPO epochs over shuffled chunk minibatches. Returns mean losses and
    /// whether the divergence guard fired.
    fn optimize(
        &mut self,
        rollout: &Rollout,
        targets: &[TrajectoryTargets],
        settings: &LossSettings,
    ) -> Result<(LossReport, bool), TrainError> {
        let n = self.model.dims().n_agents;
        let mut all = chunks(rollout);
        let mut sum = LossReport::default();
        let mut steps = 0usize;
        for _ in 0..self.config.epochs {
            all.shuffle(&mut self.update_rng);
            for batch in minibatches(&all, n, self.config.minibatch) {
                let mut tape = Tape::new();
                let p = self.model.params.bind(&mut tape);
                let pc = self.model.comm_params.bind(&mut tape);
                let (loss, report) =
                    minibatch_loss(&mut tape, &self.model, &p, &pc, rollout, targets, batch, settings)?;
                if report.ratio_dev > self.config.divergence_threshold {
                    return Ok((average(sum, steps, report), true));
                }
                tape.backward(loss)?;
                let m = &mut self.model;
                m.params.zero_grad();
                m.params.accumulate_grads(&tape, &p);
                m.comm_params.zero_grad();
                m.comm_params.accumulate_grads(&tape, &pc);
                let norm = m.params.grad_norm().hypot(m.comm_params.grad_norm());
                if !norm.is_finite() {
                    return Err(TrainError::NonFinite { component: "gradient" });
                }
                if norm > self.config.max_grad_norm {
                    let k = self.config.max_grad_norm / norm;
                    m.params.scale_grads(k);
                    m.comm_params.scale_grads(k);
                }
                let (lr, (b1, b2, eps)) = (self.config.lr, ADAM);
                m.params.adam_step(lr, b1, b2, eps)?;
                m.comm_params.adam_step(lr, b1, b2, eps)?;
                m.comm_target.polyak_from(&m.comm_params, self.config.polyak)?;
                accumulate(&mut sum, &report);
                steps += 1;
            }
        }
        Ok((average(sum, steps, LossReport::default()), false))
    }

    /// Every tensor needed to resume evaluation: parameters, the critic
    /// target copy and the normalizer statistics.
    pub fn checkpoint_records(&self) -> BTreeMap<String, Tensor> {
        checkpoint_records(&self.model, &self.normalizer)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path).map_err(CheckpointError::from)?;
        write_records(std::io::BufWriter::new(file), &self.checkpoint_records())?;
        Ok(())
    }
}

fn model_dims(config: &TrainConfig) -> ModelDims {
    ModelDims {
        obs_dim: config.env.obs_dim(),
        n_agents: config.env.n_pursuers,
        n_groups: config.n_groups(),
    }
}

/// Group chunks so each minibatch holds about `rows` agent-steps.
fn minibatches(chunks: &[Chunk], n_agents: usize, rows: usize) -> Vec<&[Chunk]> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut acc = 0;
    for (k, c) in chunks.iter().enumerate() {
        acc += c.len * n_agents;
        if acc >= rows {
            out.push(&chunks[start..=k]);
            start = k + 1;
            acc = 0;
        }
    }
    if start < chunks.len() {
        out.push(&chunks[start..]);
    }
    out
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.env += r.env;
    sum.send += r.send;
    sum.recv += r.recv;
    sum.value += r.value;
    sum.comm += r.comm;
    sum.group += r.group;
    sum.entropy += r.entropy;
    sum.total += r.total;
    sum.ratio_dev += r.ratio_dev;
}

/// Mean over `steps` reports, or `fallback` if none were taken.
fn average(sum: LossReport, steps: usize, fallback: LossReport) -> LossReport {
    if steps == 0 {
        return fallback;
    }
    let k = steps as f64;
    LossReport {
        env: sum.env / k,
        send: sum.send / k,
        recv: sum.recv / k,
        value: sum.value / k,
        comm: sum.comm / k,
        group: sum.group / k,
        entropy: sum.entropy / k,
        total: sum.total / k,
        ratio_dev: sum.ratio_dev / k,
    }
}

const TARGET_PREFIX: &str = "target.";
const NORM_COUNT: &str = "normalizer.count";
const NORM_MEAN: &str = "normalizer.mean";
const NORM_VAR: &str = "normalizer.variance";

pub fn checkpoint_records(model: &Model, normalizer: &RunningNormalizer) -> BTreeMap<String, Tensor> {
    let mut out = model.params.snapshot();
    out.extend(model.comm_params.snapshot());
    out.extend(
        model
            .comm_target
            .snapshot()
            .into_iter()
            .map(|(k, v)| (format!("{TARGET_PREFIX}{k}"), v)),
    );
    out.insert(NORM_COUNT.into(), Tensor::scalar(normalizer.count()));
    out.insert(NORM_MEAN.into(), Tensor::vector(normalizer.mean().to_vec()));
    out.insert(NORM_VAR.into(), Tensor::vector(normalizer.variance()));
    out
}

fn take_set(set: &mut ParameterSet, records: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<(), TrainError> {
    let mut part = BTreeMap::new();
    for name in set.names().map(str::to_string).collect::<Vec<_>>() {
        let t = records
            .remove(&format!("{prefix}{name}"))
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing record `{prefix}{name}`")))?;
        part.insert(name, t);
    }
    set.load_values(&part)?;
    Ok(())
}

/// Rebuild a model and normalizer for `config` from checkpoint records.
pub fn restore(
    config: &TrainConfig,
    mut records: BTreeMap<String, Tensor>,
) -> Result<(Model, RunningNormalizer), TrainError> {
    let dims = model_dims(config);
    let mut model = Model::new(dims, &mut stream_rng(config.seed, Stream::Init))?;
    take_set(&mut model.params, &mut records, "")?;
    take_set(&mut model.comm_params, &mut records, "")?;
    take_set(&mut model.comm_target, &mut records, TARGET_PREFIX)?;
    let missing = |k: &str| CheckpointError::Corrupt(format!("missing record `{k}`"));
    let count = records.remove(NORM_COUNT).ok_or_else(|| missing(NORM_COUNT))?.item();
    let mean = records.remove(NORM_MEAN).ok_or_else(|| missing(NORM_MEAN))?;
    let var = records.remove(NORM_VAR).ok_or_else(|| missing(NORM_VAR))?;
    if mean.len() != dims.obs_dim || var.len() != dims.obs_dim {
        return Err(CheckpointError::Corrupt("normalizer width does not match the config".into()).into());
    }
    if let Some(extra) = records.keys().next() {
        return Err(CheckpointError::Corrupt(format!("unexpected record `{extra}`")).into());
    }
    let normalizer = RunningNormalizer::from_stats(count, mean.data().to_vec(), var.data().to_vec());
    Ok((model, normalizer))
}

pub fn load_checkpoint(config: &TrainConfig, path: &Path) -> Result<(Model, RunningNormalizer), TrainError> {
    let file = std::fs::File::open(path).map_err(CheckpointError::from)?;
    let records = read_records(std::io::BufReader::new(file))?;
    restore(config, records)
}
