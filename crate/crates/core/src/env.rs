//! Benchmark environments with continuously scalable dynamics.
//!
//! Two small families, each parameterized by named scale factors relative to
//! nominal dynamics (`1.0` everywhere):
//!
//! - **WindyGrid** — a 5×5 gridworld with a goal self-loop at (4,4) and a
//!   stochastic wind that pushes one cell in +x with probability
//!   `0.2·wind`. Finite, so the exact solver in [`crate::tabular`] can
//!   cross-check anything sampled here.
//! - **PointMass1D** — a unit mass on a line under gravity, driven by a
//!   bounded force; the target is to hover at `x = 1`. Experts tuned to one
//!   gravity/mass setting degrade smoothly as those factors move, which is
//!   exactly the robustness axis the training code is probed on.
//!
//! Determinism contract: equal (spec, seed, action sequence) produces
//! bit-identical trajectories.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tabular::TabularMdp;

/// Named dynamics scale factors, relative to nominal (`1.0`).
///
/// Unlisted names default to `1.0`, so the empty map is the nominal setting.
/// `mass` must stay strictly positive (it divides the force); `wind` and
/// `gravity` may be zero, which simply switches the effect off.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DynamicsParam {
    entries: BTreeMap<String, f64>,
}

impl DynamicsParam {
    /// All factors at 1.0.
    pub fn nominal() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, scale: f64) -> Self {
        self.entries.insert(name.to_string(), scale);
        self
    }

    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        let mut d = Self::default();
        for (name, scale) in pairs {
            d.entries.insert((*name).to_string(), *scale);
        }
        d
    }

    /// Scale factor for `name`, defaulting to nominal.
    pub fn get(&self, name: &str) -> f64 {
        self.entries.get(name).copied().unwrap_or(1.0)
    }

    pub fn entries(&self) -> &BTreeMap<String, f64> {
        &self.entries
    }

    /// Compact stable label, e.g. `gravity0.50_mass1.20`, or `nominal`.
    pub fn label(&self) -> String {
        if self.entries.is_empty() {
            return "nominal".to_string();
        }
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}{v:.2}"))
            .collect::<Vec<_>>()
            .join("_")
    }
}

/// Environment family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvFamily {
    WindyGrid,
    PointMass1D,
}

impl EnvFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "windy-grid" | "WindyGrid" => Ok(Self::WindyGrid),
            "point-mass" | "PointMass1D" => Ok(Self::PointMass1D),
            other => Err(Error::InvalidSpec(format!("unknown family {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::WindyGrid => "windy-grid",
            Self::PointMass1D => "point-mass",
        }
    }

    /// Scale-factor names this family understands.
    pub fn dynamics_registry(&self) -> &'static [&'static str] {
        match self {
            Self::WindyGrid => &["wind"],
            Self::PointMass1D => &["gravity", "mass"],
        }
    }
}

/// Initial-state distribution descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitDist {
    /// Deterministic start at a grid cell.
    GridCell { x: usize, y: usize },
    /// Position uniform in `[lo, hi]`, velocity zero.
    UniformPosition { lo: f64, hi: f64 },
}

/// Action-space description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionKind {
    /// Index in `0..n`, carried as a 1-dim vector.
    Discrete { n: usize },
    /// Box with per-coordinate bounds `[-bound, bound]`; out-of-range
    /// actions are clipped at the boundary.
    Continuous { dim: usize, bound: f64 },
}

pub mod windy_grid {
    pub const WIDTH: usize = 5;
    pub const HEIGHT: usize = 5;
    pub const N_STATES: usize = WIDTH * HEIGHT;
    pub const N_ACTIONS: usize = 4;
    pub const GOAL: (usize, usize) = (4, 4);
    /// Wind fires with probability `BASE_WIND_PROB · wind-scale`.
    pub const BASE_WIND_PROB: f64 = 0.2;
    pub const HORIZON: usize = 100;
    pub const GAMMA: f64 = 0.9;

    pub fn state_index(x: usize, y: usize) -> usize {
        y * WIDTH + x
    }

    pub fn state_coords(index: usize) -> (usize, usize) {
        (index % WIDTH, index / WIDTH)
    }
}

pub mod point_mass {
    pub const DT: f64 = 0.05;
    pub const U_MAX: f64 = 15.0;
    pub const MASS: f64 = 1.0;
    pub const GRAVITY: f64 = 9.8;
    pub const X_BOUND: f64 = 2.0;
    pub const V_BOUND: f64 = 3.0;
    pub const TARGET_X: f64 = 1.0;
    pub const ACTION_COST: f64 = 0.01;
    pub const ACTION_BOUND: f64 = 1.0;
    pub const HORIZON: usize = 200;
    pub const GAMMA: f64 = 0.99;
    pub const INIT_LO: f64 = -0.5;
    pub const INIT_HI: f64 = 0.5;
}

/// Full declarative description of one environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: EnvFamily,
    pub dynamics: DynamicsParam,
    pub horizon: usize,
    pub gamma: f64,
    pub init: InitDist,
}

impl EnvSpec {
    /// WindyGrid with family defaults: horizon 100, γ=0.9, start (0,0).
    pub fn windy_grid(dynamics: DynamicsParam) -> Self {
        Self {
            family: EnvFamily::WindyGrid,
            dynamics,
            horizon: windy_grid::HORIZON,
            gamma: windy_grid::GAMMA,
            init: InitDist::GridCell { x: 0, y: 0 },
        }
    }

    /// PointMass1D with family defaults: horizon 200, γ=0.99,
    /// x₀ ~ U[-0.5, 0.5], v₀ = 0.
    pub fn point_mass(dynamics: DynamicsParam) -> Self {
        Self {
            family: EnvFamily::PointMass1D,
            dynamics,
            horizon: point_mass::HORIZON,
            gamma: point_mass::GAMMA,
            init: InitDist::UniformPosition {
                lo: point_mass::INIT_LO,
                hi: point_mass::INIT_HI,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidSpec("horizon must be ≥ 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "discount {} outside (0,1)",
                self.gamma
            )));
        }
        let registry = self.family.dynamics_registry();
        for (name, &scale) in self.dynamics.entries() {
            if !registry.contains(&name.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "dynamics factor {name:?} unknown to family {}",
                    self.family.name()
                )));
            }
            if !scale.is_finite() || scale < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "dynamics factor {name} = {scale} must be finite and ≥ 0"
                )));
            }
            if name == "mass" && scale <= 0.0 {
                return Err(Error::InvalidSpec("mass scale must be > 0".into()));
            }
        }
        match (self.family, &self.init) {
            (EnvFamily::WindyGrid, InitDist::GridCell { x, y }) => {
                if *x >= windy_grid::WIDTH || *y >= windy_grid::HEIGHT {
                    return Err(Error::InvalidSpec("start cell outside the grid".into()));
                }
                let wind_prob = windy_grid::BASE_WIND_PROB * self.dynamics.get("wind");
                if wind_prob > 1.0 {
                    return Err(Error::InvalidSpec(format!(
                        "wind scale {} pushes the shift probability past 1",
                        self.dynamics.get("wind")
                    )));
                }
            }
            (EnvFamily::PointMass1D, InitDist::UniformPosition { lo, hi }) => {
                if !(lo <= hi && *lo >= -point_mass::X_BOUND && *hi <= point_mass::X_BOUND) {
                    return Err(Error::InvalidSpec(
                        "initial position range outside state bounds".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::InvalidSpec(
                    "initial-state descriptor does not match the family".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn action_kind(&self) -> ActionKind {
        match self.family {
            EnvFamily::WindyGrid => ActionKind::Discrete {
                n: windy_grid::N_ACTIONS,
            },
            EnvFamily::PointMass1D => ActionKind::Continuous {
                dim: 1,
                bound: point_mass::ACTION_BOUND,
            },
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.action_kind() {
            ActionKind::Discrete { .. } => 1,
            ActionKind::Continuous { dim, .. } => dim,
        }
    }
}

/// One environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// True environment reward. Hidden from imitation learners: demo
    /// recording strips it.
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Whole-episode (or episode-prefix) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env_id: usize,
    pub dynamics: DynamicsParam,
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn undiscounted_return(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }
}

/// A live environment instance with its own RNG stream.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    state: Vec<f64>,
    steps_taken: usize,
    episode_over: bool,
}

/// Build an environment whose stepping is a pure function of
/// (spec, seed, action sequence).
pub fn make_env(spec: &EnvSpec, seed: u64) -> Result<Environment> {
    spec.validate()?;
    let mut env = Environment {
        spec: spec.clone(),
        rng: rng::stream(seed, "env", 0),
        state: Vec::new(),
        steps_taken: 0,
        episode_over: false,
    };
    env.reset();
    Ok(env)
}

impl Environment {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Snapshot of the internal RNG, sufficient to recreate this
    /// environment's future randomness on another machine.
    pub fn rng_state(&self) -> rng::RngState {
        rng::RngState::capture(&self.rng)
    }

    /// Restore the RNG snapshot taken by [`Environment::rng_state`].
    /// The current episode (if any) is abandoned; callers are expected
    /// to `reset` before stepping again.
    pub fn restore_rng(&mut self, snapshot: &rng::RngState) {
        self.rng = snapshot.restore();
        self.episode_over = true;
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Start a fresh episode and return its initial state.
    pub fn reset(&mut self) -> Vec<f64> {
        self.state = match &self.spec.init {
            InitDist::GridCell { x, y } => vec![*x as f64, *y as f64],
            InitDist::UniformPosition { lo, hi } => {
                let x = lo + (hi - lo) * self.rng.random::<f64>();
                vec![x, 0.0]
            }
        };
        self.steps_taken = 0;
        self.episode_over = false;
        self.state.clone()
    }

    /// Advance one step. Errors if the episode already ended.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if self.episode_over {
            return Err(Error::EpisodeOver);
        }
        if action.len() != self.spec.action_dim() {
            return Err(Error::DimMismatch {
                what: "action",
                expected: self.spec.action_dim(),
                got: action.len(),
            });
        }
        let state = self.state.clone();
        let (next_state, reward, action_taken) = match self.spec.family {
            EnvFamily::WindyGrid => self.step_grid(action)?,
            EnvFamily::PointMass1D => self.step_point_mass(action),
        };
        self.steps_taken += 1;
        let done = self.steps_taken >= self.spec.horizon;
        self.episode_over = done;
        self.state = next_state.clone();
        Ok(Transition {
            state,
            action: action_taken,
            reward,
            next_state,
            done,
        })
    }

    fn step_grid(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        use windy_grid::*;
        let a = action[0] as isize;
        if action[0].fract() != 0.0 || !(0..N_ACTIONS as isize).contains(&a) {
            return Err(Error::InvalidSpec(format!(
                "grid action must be an integer in 0..{N_ACTIONS}, got {}",
                action[0]
            )));
        }
        let (x, y) = (self.state[0] as usize, self.state[1] as usize);
        // Wind is sampled every step so the RNG stream advances identically
        // whether or not the shift can apply from the current cell.
        let wind_prob = BASE_WIND_PROB * self.spec.dynamics.get("wind");
        let wind_fires = self.rng.random::<f64>() < wind_prob;

        let (nx, ny, reward) = if (x, y) == GOAL {
            (x, y, 1.0)
        } else {
            // 0:+x  1:−x  2:+y  3:−y, clipped at the border.
            let (mut nx, mut ny) = (x as isize, y as isize);
            match a {
                0 => nx += 1,
                1 => nx -= 1,
                2 => ny += 1,
                _ => ny -= 1,
            }
            let mut nx = nx.clamp(0, WIDTH as isize - 1) as usize;
            let ny = ny.clamp(0, HEIGHT as isize - 1) as usize;
            if wind_fires {
                nx = (nx + 1).min(WIDTH - 1);
            }
            (nx, ny, 0.0)
        };
        Ok((vec![nx as f64, ny as f64], reward, vec![a as f64]))
    }

    fn step_point_mass(&mut self, action: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
        use point_mass::*;
        let a = action[0].clamp(-ACTION_BOUND, ACTION_BOUND);
        let (x, v) = (self.state[0], self.state[1]);
        let mass = MASS * self.spec.dynamics.get("mass");
        let gravity = GRAVITY * self.spec.dynamics.get("gravity");
        let accel = U_MAX * a / mass - gravity;
        let v2 = (v + DT * accel).clamp(-V_BOUND, V_BOUND);
        let x2 = (x + DT * v2).clamp(-X_BOUND, X_BOUND);
        let reward = -(x - TARGET_X).powi(2) - ACTION_COST * a * a;
        (vec![x2, v2], reward, vec![a])
    }
}

/// Anything that can choose actions given a state and an explicit RNG.
pub trait Actor {
    fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
}

impl<F> Actor for F
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
{
    fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self(state, rng)
    }
}

/// Uniform-random actor over the declared action space.
pub struct UniformActor {
    kind: ActionKind,
}

impl UniformActor {
    pub fn new(kind: ActionKind) -> Self {
        Self { kind }
    }
}

impl Actor for UniformActor {
    fn act(&mut self, _state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self.kind {
            ActionKind::Discrete { n } => vec![rng.random_range(0..n) as f64],
            ActionKind::Continuous { dim, bound } => (0..dim)
                .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
        }
    }
}

/// Collect whole episodes (resetting on `done`) until at least `n_steps`
/// transitions have been gathered. The action RNG is separate from the
/// environment's internal stream so actor and dynamics noise never alias.
pub fn rollout<A: Actor>(
    env: &mut Environment,
    actor: &mut A,
    n_steps: usize,
    action_rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    if n_steps == 0 {
        return Err(Error::InvalidSpec("rollout needs n_steps ≥ 1".into()));
    }
    let mut trajectories = Vec::new();
    let mut collected = 0;
    while collected < n_steps {
        let mut state = env.reset();
        let mut steps = Vec::with_capacity(env.spec.horizon);
        loop {
            let action = actor.act(&state, action_rng);
            let tr = env.step(&action)?;
            state = tr.next_state.clone();
            let done = tr.done;
            steps.push(tr);
            collected += 1;
            if done {
                break;
            }
        }
        trajectories.push(Trajectory {
            env_id: 0,
            dynamics: env.spec.dynamics.clone(),
            steps,
        });
    }
    Ok(trajectories)
}

/// Discounted empirical state-action visitation accumulated from episodes:
/// step `t` of each episode contributes `γ^t` to its `(s,a)` cell, averaged
/// over episodes. Totals `(1-γ^T)/(1-γ)`, so after normalization it is
/// comparable with an exact solve.
pub fn empirical_occupancy<F>(
    trajectories: &[Trajectory],
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    mut cell: F,
) -> Vec<f64>
where
    F: FnMut(&Transition) -> (usize, usize),
{
    let mut counts = vec![0.0; n_states * n_actions];
    for traj in trajectories {
        let mut w = 1.0;
        for tr in &traj.steps {
            let (s, a) = cell(tr);
            counts[s * n_actions + a] += w;
            w *= gamma;
        }
    }
    let n = trajectories.len().max(1) as f64;
    for c in &mut counts {
        *c /= n;
    }
    counts
}

/// Exact finite-MDP mirror of WindyGrid at the given wind scale, plus its
/// reward vector `r[s·4+a]` (1 on the goal self-loop, 0 elsewhere).
pub fn windy_grid_mdp(wind_scale: f64) -> Result<(TabularMdp, Vec<f64>)> {
    use windy_grid::*;
    let wind_prob = BASE_WIND_PROB * wind_scale;
    if !(0.0..=1.0).contains(&wind_prob) {
        return Err(Error::InvalidSpec(format!(
            "wind scale {wind_scale} gives shift probability {wind_prob}"
        )));
    }
    let goal = state_index(GOAL.0, GOAL.1);
    let mut trans = vec![0.0; N_STATES * N_ACTIONS * N_STATES];
    let mut rewards = vec![0.0; N_STATES * N_ACTIONS];
    for s in 0..N_STATES {
        let (x, y) = state_coords(s);
        for a in 0..N_ACTIONS {
            let row = &mut trans[(s * N_ACTIONS + a) * N_STATES..][..N_STATES];
            if s == goal {
                row[goal] = 1.0;
                rewards[s * N_ACTIONS + a] = 1.0;
                continue;
            }
            let (mut nx, mut ny) = (x as isize, y as isize);
            match a {
                0 => nx += 1,
                1 => nx -= 1,
                2 => ny += 1,
                _ => ny -= 1,
            }
            let nx = nx.clamp(0, WIDTH as isize - 1) as usize;
            let ny = ny.clamp(0, HEIGHT as isize - 1) as usize;
            let shifted = state_index((nx + 1).min(WIDTH - 1), ny);
            let plain = state_index(nx, ny);
            row[plain] += 1.0 - wind_prob;
            row[shifted] += wind_prob;
        }
    }
    let mut mu0 = vec![0.0; N_STATES];
    mu0[state_index(0, 0)] = 1.0;
    let mdp = TabularMdp::new(N_STATES, N_ACTIONS, trans, mu0, GAMMA)?;
    Ok((mdp, rewards))
}
