//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::env::PursuitConfig;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("duplicate config key `{0}`")]
    Duplicate(String),
}

/// Which parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Send and recipient heads use the environment advantage.
    NoCounterfactual,
    /// A single group: uniform affinity, no grouping losses.
    NoGrouping,
}

impl Variant {
    pub const NAMES: [&'static str; 3] = ["full", "no_counterfactual", "no_grouping"];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCounterfactual => "no_counterfactual",
            Variant::NoGrouping => "no_grouping",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_counterfactual" => Ok(Variant::NoCounterfactual),
            "no_grouping" => Ok(Variant::NoGrouping),
            other => Err(format!(
                "unknown variant `{other}`; valid: {}",
                Variant::NAMES.join(", ")
            )),
        }
    }
}

/// Number of groups: fixed, or derived from the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupCount {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: PursuitConfig,
    pub groups: GroupCount,
    pub macro_steps: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub lambda_bal: f64,
    pub lambda_ent: f64,
    pub lambda_edge_start: f64,
    pub lambda_edge_end: f64,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub comm_coef: f64,
    pub group_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub ent_action: f64,
    pub ent_send: f64,
    pub ent_recv: f64,
    pub max_grad_norm: f64,
    pub horizon: usize,
    pub n_envs: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Checkpoint every this many updates (0: only initial and final).
    pub checkpoint_every: usize,
    pub polyak: f64,
    pub divergence_threshold: f64,
    /// Write rollout frame dumps.
    pub frames: bool,
    pub eval_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: PursuitConfig::default(),
            groups: GroupCount::Auto,
            macro_steps: 10,
            tau_start: 10.0,
            tau_end: 0.5,
            lambda_bal: 0.1,
            lambda_ent: 0.01,
            lambda_edge_start: 0.0,
            lambda_edge_end: 1.0,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            comm_coef: 1.0,
            group_coef: 1.0,
            epochs: 8,
            minibatch: 4096,
            lr: 3e-4,
            ent_action: 0.02,
            ent_send: 0.01,
            ent_recv: 0.01,
            max_grad_norm: 1.0,
            horizon: 256,
            n_envs: 1,
            total_steps: 200_000,
            seed: 0,
            variant: Variant::Full,
            checkpoint_every: 0,
            polyak: 0.995,
            divergence_threshold: 10.0,
            frames: false,
            eval_seeds: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn invalid(key: &str, value: impl fmt::Display, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    /// Every recognized key in manifest order.
    pub const KEYS: [&'static str; 39] = [
        "env.map_size",
        "env.n_pursuers",
        "env.n_evaders",
        "env.obs_range",
        "env.max_cycles",
        "env.catch_reward",
        "env.tag_reward",
        "env.urgency_reward",
        "M",
        "K",
        "tau_start",
        "tau_end",
        "lambda_bal",
        "lambda_ent",
        "lambda_edge_start",
        "lambda_edge_end",
        "clip",
        "gamma",
        "gae_lambda",
        "c_value",
        "c_comm",
        "c_group",
        "epochs",
        "minibatch",
        "lr",
        "ent_action",
        "ent_send",
        "ent_recv",
        "max_grad_norm",
        "horizon",
        "n_envs",
        "total_steps",
        "seed",
        "variant",
        "checkpoint_every",
        "polyak",
        "divergence_threshold",
        "frames",
        "eval.seeds",
    ];

    /// Resolved number of groups.
    pub fn n_groups(&self) -> usize {
        if self.variant == Variant::NoGrouping {
            return 1;
        }
        match self.groups {
            GroupCount::Auto => self.env.default_groups(),
            GroupCount::Fixed(m) => m,
        }
    }

    /// Temperature after `step` of `total_steps` environment steps.
    pub fn tau_at(&self, step: usize) -> f64 {
        lerp(self.tau_start, self.tau_end, self.progress(step))
    }

    pub fn lambda_edge_at(&self, step: usize) -> f64 {
        lerp(self.lambda_edge_start, self.lambda_edge_end, self.progress(step))
    }

    fn progress(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        (step as f64 / self.total_steps as f64).min(1.0)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "env.map_size" => self.env.map_size = parse(key, v)?,
            "env.n_pursuers" => self.env.n_pursuers = parse(key, v)?,
            "env.n_evaders" => self.env.n_evaders = parse(key, v)?,
            "env.obs_range" => self.env.obs_range = parse(key, v)?,
            "env.max_cycles" => self.env.max_cycles = parse(key, v)?,
            "env.catch_reward" => self.env.catch_reward = parse(key, v)?,
            "env.tag_reward" => self.env.tag_reward = parse(key, v)?,
            "env.urgency_reward" => self.env.urgency_reward = parse(key, v)?,
            "M" => {
                self.groups = if v == "auto" {
                    GroupCount::Auto
                } else {
                    GroupCount::Fixed(parse(key, v)?)
                }
            }
            "K" => self.macro_steps = parse(key, v)?,
            "tau_start" => self.tau_start = parse(key, v)?,
            "tau_end" => self.tau_end = parse(key, v)?,
            "lambda_bal" => self.lambda_bal = parse(key, v)?,
            "lambda_ent" => self.lambda_ent = parse(key, v)?,
            "lambda_edge_start" => self.lambda_edge_start = parse(key, v)?,
            "lambda_edge_end" => self.lambda_edge_end = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "gae_lambda" => self.gae_lambda = parse(key, v)?,
            "c_value" => self.value_coef = parse(key, v)?,
            "c_comm" => self.comm_coef = parse(key, v)?,
            "c_group" => self.group_coef = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "minibatch" => self.minibatch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "ent_action" => self.ent_action = parse(key, v)?,
            "ent_send" => self.ent_send = parse(key, v)?,
            "ent_recv" => self.ent_recv = parse(key, v)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "n_envs" => self.n_envs = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse().map_err(|e: String| invalid(key, v, &e))?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "polyak" => self.polyak = parse(key, v)?,
            "divergence_threshold" => self.divergence_threshold = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "eval.seeds" => self.eval_seeds = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "env.map_size" => self.env.map_size.to_string(),
            "env.n_pursuers" => self.env.n_pursuers.to_string(),
            "env.n_evaders" => self.env.n_evaders.to_string(),
            "env.obs_range" => self.env.obs_range.to_string(),
            "env.max_cycles" => self.env.max_cycles.to_string(),
            "env.catch_reward" => fmt_f64(self.env.catch_reward),
            "env.tag_reward" => fmt_f64(self.env.tag_reward),
            "env.urgency_reward" => fmt_f64(self.env.urgency_reward),
            "M" => match self.groups {
                GroupCount::Auto => "auto".into(),
                GroupCount::Fixed(m) => m.to_string(),
            },
            "K" => self.macro_steps.to_string(),
            "tau_start" => fmt_f64(self.tau_start),
            "tau_end" => fmt_f64(self.tau_end),
            "lambda_bal" => fmt_f64(self.lambda_bal),
            "lambda_ent" => fmt_f64(self.lambda_ent),
            "lambda_edge_start" => fmt_f64(self.lambda_edge_start),
            "lambda_edge_end" => fmt_f64(self.lambda_edge_end),
            "clip" => fmt_f64(self.clip),
            "gamma" => fmt_f64(self.gamma),
            "gae_lambda" => fmt_f64(self.gae_lambda),
            "c_value" => fmt_f64(self.value_coef),
            "c_comm" => fmt_f64(self.comm_coef),
            "c_group" => fmt_f64(self.group_coef),
            "epochs" => self.epochs.to_string(),
            "minibatch" => self.minibatch.to_string(),
            "lr" => fmt_f64(self.lr),
            "ent_action" => fmt_f64(self.ent_action),
            "ent_send" => fmt_f64(self.ent_send),
            "ent_recv" => fmt_f64(self.ent_recv),
            "max_grad_norm" => fmt_f64(self.max_grad_norm),
            "horizon" => self.horizon.to_string(),
            "n_envs" => self.n_envs.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "polyak" => fmt_f64(self.polyak),
            "divergence_threshold" => fmt_f64(self.divergence_threshold),
            "frames" => self.frames.to_string(),
            "eval.seeds" => self.eval_seeds.to_string(),
            _ => return None,
        })
    }

    /// Range and consistency checks; errors name the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env
            .validate()
            .map_err(|e| invalid("env", "", &e.to_string()))?;
        if let GroupCount::Fixed(m) = self.groups {
            if m < 1 {
                return Err(invalid("M", m, "must be at least 1"));
            }
        }
        let positive_usize = [
            ("K", self.macro_steps),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("horizon", self.horizon),
            ("n_envs", self.n_envs),
            ("eval.seeds", self.eval_seeds),
        ];
        for (k, v) in positive_usize {
            if v == 0 {
                return Err(invalid(k, v, "must be positive"));
            }
        }
        let non_negative = [
            ("lambda_bal", self.lambda_bal),
            ("lambda_ent", self.lambda_ent),
            ("lambda_edge_start", self.lambda_edge_start),
            ("lambda_edge_end", self.lambda_edge_end),
            ("clip", self.clip),
            ("c_value", self.value_coef),
            ("c_comm", self.comm_coef),
            ("c_group", self.group_coef),
            ("ent_action", self.ent_action),
            ("ent_send", self.ent_send),
            ("ent_recv", self.ent_recv),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(k, v, "must be a finite non-negative number"));
            }
        }
        let positive = [
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
            ("lr", self.lr),
            ("max_grad_norm", self.max_grad_norm),
            ("divergence_threshold", self.divergence_threshold),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(k, v, "must be a finite positive number"));
            }
        }
        let unit = [
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("polyak", self.polyak),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(k, v, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Parse text on top of the defaults. Unknown keys are rejected.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.into()));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Apply a `KEY=VALUE` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.into(),
        })?;
        self.set(k.trim(), v)
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let v = self.get(k).expect("every listed key has a value");
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    if frac >= 1.0 {
        b
    } else {
        a + (b - a) * frac
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_exact_at_endpoints() {
        let c = TrainConfig { total_steps: 1000, ..Default::default() };
        assert_eq!(c.tau_at(0), 10.0);
        assert_eq!(c.tau_at(1000), 0.5);
        assert_eq!(c.lambda_edge_at(0), 0.0);
        assert_eq!(c.lambda_edge_at(1000), 1.0);
        assert!((c.tau_at(500) - 5.25).abs() < 1e-12);
        assert!((c.lambda_edge_at(250) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn auto_groups_and_ablation() {
        let mut c = TrainConfig::default();
        assert_eq!(c.n_groups(), 2);
        c.variant = Variant::NoGrouping;
        assert_eq!(c.n_groups(), 1);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("lr", "0.001").unwrap();
        c.set("M", "3").unwrap();
        c.set("variant", "no_counterfactual").unwrap();
        let back = TrainConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert_eq!(
            TrainConfig::parse_text("bogus = 1").unwrap_err(),
            ConfigError::UnknownKey("bogus".into())
        );
        let mut c = TrainConfig::default();
        c.set("M", "0").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("`M`"), "{err}");
        assert!(c.set("variant", "nope").unwrap_err().to_string().contains("no_grouping"));
        assert!(matches!(
            TrainConfig::parse_text("K = 10\nK = 5"),
            Err(ConfigError::Duplicate(_))
        ));
        assert!(matches!(TrainConfig::parse_text("K"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let c = TrainConfig::parse_text("# header\n\nenv.map_size = 12  # small\n").unwrap();
        assert_eq!(c.env.map_size, 12);
    }
}
