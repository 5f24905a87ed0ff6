use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Side of the pooled grid used for the global state vector.
pub const POOL: usize = 10;
/// Length of [`global_state_vector`]: three pooled channels plus the step slot.
pub const GLOBAL_STATE_DIM: usize = 3 * POOL * POOL + 1;
pub const N_ACTIONS: usize = 6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid pursuit config: {0}")]
    InvalidConfig(String),
    #[error("cannot place {agents} agents on {free} free cells")]
    Unplaceable { agents: usize, free: usize },
    #[error("invalid action {action} for pursuer {agent}")]
    InvalidAction { agent: usize, action: usize },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
}

/// Discrete pursuer actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
    Tag,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
        Action::Tag,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay | Action::Tag => (0, 0),
        }
    }
}

const NEIGHBORS: [(i32, i32); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];
/// Evader moves: the four directions or staying put.
const EVADER_MOVES: [(i32, i32); 5] = [(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)];

#[derive(Debug, Clone, PartialEq)]
pub struct PursuitConfig {
    pub map_size: usize,
    pub n_pursuers: usize,
    pub n_evaders: usize,
    pub obs_range: usize,
    pub max_cycles: usize,
    pub catch_reward: f64,
    pub tag_reward: f64,
    pub urgency_reward: f64,
    pub seed: u64,
}

impl Default for PursuitConfig {
    fn default() -> Self {
        Self {
            map_size: 20,
            n_pursuers: 8,
            n_evaders: 4,
            obs_range: 7,
            max_cycles: 500,
            catch_reward: 5.0,
            tag_reward: 0.0,
            urgency_reward: 0.0,
            seed: 0,
        }
    }
}

impl PursuitConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: String| Err(EnvError::InvalidConfig(m));
        if self.obs_range % 2 == 0 {
            return fail(format!("obs_range must be odd, got {}", self.obs_range));
        }
        if self.n_evaders >= self.n_pursuers {
            return fail(format!(
                "need fewer evaders than pursuers, got {} >= {}",
                self.n_evaders, self.n_pursuers
            ));
        }
        if self.n_evaders == 0 {
            return fail("need at least one evader".into());
        }
        if self.map_size < self.obs_range {
            return fail(format!(
                "map_size {} smaller than obs_range {}",
                self.map_size, self.obs_range
            ));
        }
        if self.max_cycles == 0 {
            return fail("max_cycles must be positive".into());
        }
        if self.tag_reward != 0.0 || self.urgency_reward != 0.0 {
            return fail("tag_reward and urgency_reward are fixed at 0".into());
        }
        Ok(())
    }

    /// Length of one flattened observation patch.
    pub fn obs_dim(&self) -> usize {
        self.obs_range * self.obs_range * 3
    }

    /// Default number of groups for this scenario: `floor(E / 2)`, at least 1.
    pub fn default_groups(&self) -> usize {
        (self.n_evaders / 2).max(1)
    }
}

pub type Pos = (i32, i32);

/// Grid contents at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub size: usize,
    /// Row-major `size x size`; indexed `y * size + x`.
    pub obstacles: Vec<bool>,
    pub pursuers: Vec<Pos>,
    /// `None` once removed.
    pub evaders: Vec<Option<Pos>>,
    pub step: usize,
}

impl EnvState {
    pub fn in_bounds(&self, (x, y): Pos) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size
    }

    /// In bounds and not an obstacle.
    pub fn is_open(&self, p: Pos) -> bool {
        self.in_bounds(p) && !self.obstacles[p.1 as usize * self.size + p.0 as usize]
    }

    pub fn pursuer_at(&self, p: Pos) -> bool {
        self.pursuers.contains(&p)
    }

    pub fn evader_at(&self, p: Pos) -> bool {
        self.evaders.iter().any(|e| *e == Some(p))
    }

    pub fn alive_evaders(&self) -> usize {
        self.evaders.iter().filter(|e| e.is_some()).count()
    }

    pub fn free_cells(&self) -> usize {
        self.obstacles.iter().filter(|o| !**o).count()
    }

    /// Open 4-neighbors of `p`.
    pub fn open_neighbors(&self, p: Pos) -> Vec<Pos> {
        NEIGHBORS
            .iter()
            .map(|(dx, dy)| (p.0 + dx, p.1 + dy))
            .filter(|q| self.is_open(*q))
            .collect()
    }

    /// `R x R x 3` patch centered on pursuer `agent`, flattened as
    /// `((dy * R) + dx) * 3 + channel` with channels obstacle, pursuer, evader.
    /// Out-of-bounds cells read as obstacles.
    pub fn observe(&self, agent: usize, range: usize) -> Vec<f64> {
        let half = (range / 2) as i32;
        let (cx, cy) = self.pursuers[agent];
        let mut out = vec![0.0; range * range * 3];
        for dy in 0..range as i32 {
            for dx in 0..range as i32 {
                let p = (cx + dx - half, cy + dy - half);
                let base = ((dy as usize) * range + dx as usize) * 3;
                if !self.is_open(p) {
                    out[base] = 1.0;
                }
                if self.in_bounds(p) {
                    out[base + 1] = self.pursuers.iter().filter(|q| **q == p).count() as f64;
                    out[base + 2] = self.evaders.iter().filter(|e| **e == Some(p)).count() as f64;
                }
            }
        }
        out
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub done: bool,
    /// Evader indices removed on this step.
    pub removed: Vec<usize>,
}

impl StepOutcome {
    /// Shared cooperative reward: the sum of per-pursuer rewards.
    pub fn team_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Surround-capture pursuit gridworld with randomly moving evaders.
#[derive(Debug, Clone)]
pub struct PursuitEnv {
    config: PursuitConfig,
    state: EnvState,
    rng: ChaCha8Rng,
}

impl PursuitEnv {
    /// Build and reset. Obstacles are limited to the implicit border.
    pub fn new(config: PursuitConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let s = config.map_size;
        let state = EnvState {
            size: s,
            obstacles: vec![false; s * s],
            pursuers: Vec::new(),
            evaders: Vec::new(),
            step: 0,
        };
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut env = Self { config, state, rng };
        env.reset()?;
        Ok(env)
    }

    /// Construct with an explicit state (tests, scripted scenarios).
    pub fn with_state(config: PursuitConfig, state: EnvState) -> Result<Self, EnvError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, state, rng })
    }

    pub fn config(&self) -> &PursuitConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Place all agents on distinct free cells, uniformly at random.
    pub fn reset(&mut self) -> Result<Vec<Vec<f64>>, EnvError> {
        let free: Vec<usize> = (0..self.state.obstacles.len())
            .filter(|i| !self.state.obstacles[*i])
            .collect();
        let (p, e) = (self.config.n_pursuers, self.config.n_evaders);
        if p + e > free.len() {
            return Err(EnvError::Unplaceable {
                agents: p + e,
                free: free.len(),
            });
        }
        let s = self.state.size;
        let picks = sample(&mut self.rng, free.len(), p + e);
        let cells: Vec<Pos> = picks
            .iter()
            .map(|k| {
                let c = free[k];
                ((c % s) as i32, (c / s) as i32)
            })
            .collect();
        self.state.pursuers = cells[..p].to_vec();
        self.state.evaders = cells[p..].iter().map(|c| Some(*c)).collect();
        self.state.step = 0;
        Ok(self.observations())
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.config.n_pursuers)
            .map(|i| self.state.observe(i, self.config.obs_range))
            .collect()
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome, EnvError> {
        let n = self.config.n_pursuers;
        if actions.len() != n {
            return Err(EnvError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let acts = actions
            .iter()
            .enumerate()
            .map(|(agent, &a)| Action::from_index(a).ok_or(EnvError::InvalidAction { agent, action: a }))
            .collect::<Result<Vec<_>, _>>()?;

        // Pursuers move in index order; a move into an occupied cell is blocked.
        for (i, act) in acts.iter().enumerate() {
            let (dx, dy) = act.delta();
            if (dx, dy) == (0, 0) {
                continue;
            }
            let cur = self.state.pursuers[i];
            let target = (cur.0 + dx, cur.1 + dy);
            if self.state.is_open(target) && !self.state.pursuer_at(target) && !self.state.evader_at(target) {
                self.state.pursuers[i] = target;
            }
        }

        // Evaders take uniform random moves; blocked moves become stay.
        for k in 0..self.state.evaders.len() {
            let Some(cur) = self.state.evaders[k] else { continue };
            let (dx, dy) = EVADER_MOVES[self.rng.gen_range(0..EVADER_MOVES.len())];
            let target = (cur.0 + dx, cur.1 + dy);
            if target != cur
                && self.state.is_open(target)
                && !self.state.pursuer_at(target)
                && !self.state.evader_at(target)
            {
                self.state.evaders[k] = Some(target);
            }
        }

        let mut rewards = vec![0.0; n];
        let removed = capture_events(&self.state, &acts);
        for (k, catchers) in &removed {
            self.state.evaders[*k] = None;
            for &c in catchers {
                rewards[c] += self.config.catch_reward;
            }
        }

        self.state.step += 1;
        let done = self.state.alive_evaders() == 0 || self.state.step >= self.config.max_cycles;
        Ok(StepOutcome {
            rewards,
            observations: self.observations(),
            done,
            removed: removed.into_iter().map(|(k, _)| k).collect(),
        })
    }

    pub fn global_state(&self) -> Vec<f64> {
        global_state_vector(&self.state, self.config.max_cycles)
    }
}

/// Evaders removed by the surround rule, with the pursuers credited for each.
///
/// An evader is removed when every open 4-neighbor holds a pursuer and at
/// least one of those pursuers tagged this step. All removals are judged on
/// the same configuration.
pub fn capture_events(state: &EnvState, actions: &[Action]) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (k, e) in state.evaders.iter().enumerate() {
        let Some(pos) = *e else { continue };
        let open = state.open_neighbors(pos);
        if open.is_empty() {
            continue;
        }
        let mut catchers = Vec::with_capacity(open.len());
        let mut surrounded = true;
        for q in &open {
            match state.pursuers.iter().position(|p| p == q) {
                Some(i) => catchers.push(i),
                None => {
                    surrounded = false;
                    break;
                }
            }
        }
        if surrounded && catchers.iter().any(|&i| actions[i] == Action::Tag) {
            catchers.sort_unstable();
            out.push((k, catchers));
        }
    }
    out
}

/// Per-axis overlap of unit cells `[c, c+1)` with `POOL` equal bins of `[0, size)`.
fn pool_weights(size: usize) -> Vec<Vec<(usize, f64)>> {
    let bin = size as f64 / POOL as f64;
    (0..size)
        .map(|c| {
            let (lo, hi) = (c as f64, c as f64 + 1.0);
            (0..POOL)
                .filter_map(|b| {
                    let (blo, bhi) = (b as f64 * bin, (b + 1) as f64 * bin);
                    let w = hi.min(bhi) - lo.max(blo);
                    (w > 1e-12).then_some((b, w))
                })
                .collect()
        })
        .collect()
}

/// Fixed-length state summary: each channel area-averaged onto a
/// `POOL x POOL` grid, then the step counter divided by `max_cycles`.
///
/// Cells are unit squares and bins are squares of side `size / POOL`, so a
/// bin's entry is the occupied fraction of its area and
/// `sum(channel) * bin_area` equals the channel's total count.
pub fn global_state_vector(state: &EnvState, max_cycles: usize) -> Vec<f64> {
    let s = state.size;
    let weights = pool_weights(s);
    let bin_area = (s as f64 / POOL as f64).powi(2);
    let mut out = vec![0.0; GLOBAL_STATE_DIM];
    let mut deposit = |channel: usize, (x, y): Pos, amount: f64| {
        for &(bx, wx) in &weights[x as usize] {
            for &(by, wy) in &weights[y as usize] {
                out[channel * POOL * POOL + by * POOL + bx] += amount * wx * wy / bin_area;
            }
        }
    };
    for y in 0..s {
        for x in 0..s {
            if state.obstacles[y * s + x] {
                deposit(0, (x as i32, y as i32), 1.0);
            }
        }
    }
    for &p in &state.pursuers {
        deposit(1, p, 1.0);
    }
    for e in state.evaders.iter().flatten() {
        deposit(2, *e, 1.0);
    }
    out[GLOBAL_STATE_DIM - 1] = state.step as f64 / max_cycles as f64;
    out
}

/// One comma-separated frame line: `t`, pursuer `x,y` pairs, evader `x,y`
/// pairs (`-1,-1` once removed), then the number of removals this step.
pub fn frame_line(state: &EnvState, removals: usize) -> String {
    let mut fields = vec![state.step.to_string()];
    for p in &state.pursuers {
        fields.push(p.0.to_string());
        fields.push(p.1.to_string());
    }
    for e in &state.evaders {
        let (x, y) = e.unwrap_or((-1, -1));
        fields.push(x.to_string());
        fields.push(y.to_string());
    }
    fields.push(removals.to_string());
    fields.join(",")
}
