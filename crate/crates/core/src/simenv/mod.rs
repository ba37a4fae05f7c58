//! Toy closed-loop substrate: a 2-D point mass among circular hazards, a
//! stochastic chunking policy with a hidden quality tag, an analytic critic,
//! and a kinematic world model that accumulates drift with every rollout.
//!
//! Actions are `[vx, vy, jolt]`. Velocities are clipped to `max_speed`; a
//! chunk with any `jolt > 0.5` destabilizes the mass, which then fails
//! `destabilize_delay` steps after the chunk ends unless it reaches the goal
//! first.
//!
//! Reward constants: `-step_cost` every step, `+goal_reward` on the step that
//! enters the goal disc, `+collision_reward` on a step that enters a hazard
//! and `+fail_reward` on the step a destabilized mass fails. Collisions and
//! failures are absorbing: the episode ends on that step.

mod rollout;

pub use rollout::{
    generate_training_traces, run_closed_loop, write_tags_csv, CandidateScorer, ClosedLoopConfig,
    ClosedLoopRun, ConstScorer, EpisodeRun, OracleScorer, QualityTag, TraceGenConfig,
    VerifierScorer,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::trace_model::ActionChunk;

pub const ACTION_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hazard {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Hazard {
    fn contains(&self, p: [f64; 2]) -> bool {
        dist(p, [self.x, self.y]) < self.r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub hazards: Vec<Hazard>,
}

impl TaskSpec {
    pub fn preset(name: &str) -> Option<TaskSpec> {
        let h = |x, y, r| Hazard { x, y, r };
        let spec = match name {
            "reach" => TaskSpec {
                id: name.into(),
                start: [1.0, 1.0],
                goal: [9.0, 9.0],
                goal_radius: 0.5,
                hazards: vec![h(4.0, 6.0, 1.0), h(6.0, 4.0, 1.0)],
            },
            "corridor" => TaskSpec {
                id: name.into(),
                start: [1.0, 5.0],
                goal: [9.0, 5.0],
                goal_radius: 0.5,
                hazards: vec![h(5.0, 6.6, 1.2), h(5.0, 3.4, 1.2)],
            },
            "offset" => TaskSpec {
                id: name.into(),
                start: [1.0, 3.0],
                goal: [9.0, 7.0],
                goal_radius: 0.5,
                hazards: vec![h(3.5, 5.5, 0.8), h(6.5, 4.5, 0.8)],
            },
            _ => return None,
        };
        Some(spec)
    }

    pub const PRESETS: [&'static str; 3] = ["reach", "corridor", "offset"];

    fn validate(&self, extent: f64) -> Result<()> {
        let inside = |p: [f64; 2]| (0.0..=extent).contains(&p[0]) && (0.0..=extent).contains(&p[1]);
        if !inside(self.start) || !inside(self.goal) {
            return Err(Error::Config(format!(
                "task `{}`: start/goal outside workspace",
                self.id
            )));
        }
        if !(self.goal_radius > 0.0) {
            return Err(Error::Config(format!(
                "task `{}`: goal_radius must be > 0",
                self.id
            )));
        }
        for hz in &self.hazards {
            if !inside([hz.x, hz.y]) || !(hz.r > 0.0) {
                return Err(Error::Config(format!(
                    "task `{}`: invalid hazard {hz:?}",
                    self.id
                )));
            }
            if hz.contains(self.start) {
                return Err(Error::Config(format!(
                    "task `{}`: start inside a hazard",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvConfig {
    pub extent: f64,
    pub max_speed: f64,
    pub max_steps: usize,
    pub noise_sigma: f64,
    /// Uniform start jitter half-width per axis.
    pub start_jitter: f64,
    pub step_cost: f64,
    pub goal_reward: f64,
    pub collision_reward: f64,
    pub fail_reward: f64,
    pub destabilize_delay: usize,
    pub gamma: f64,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

impl Default for ToyEnvConfig {
    fn default() -> Self {
        ToyEnvConfig {
            extent: 10.0,
            max_speed: 0.2,
            max_steps: 150,
            noise_sigma: 0.01,
            start_jitter: 0.3,
            step_cost: 0.02,
            goal_reward: 2.0,
            collision_reward: -2.0,
            fail_reward: -2.0,
            destabilize_delay: 10,
            gamma: 0.99,
            tasks: TaskSpec::PRESETS
                .iter()
                .map(|n| TaskSpec::preset(n).expect("preset"))
                .collect(),
            seed: 0,
        }
    }
}

impl ToyEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) || !(self.max_speed > 0.0) {
            return Err(Error::Config("extent and max_speed must be > 0".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.start_jitter >= 0.0) {
            return Err(Error::Config(
                "noise_sigma and start_jitter must be >= 0".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must be in (0,1)".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        self.tasks.iter().try_for_each(|t| t.validate(self.extent))
    }

    /// Analytic critic: discounted shortest-path potential to the goal disc,
    /// assuming full-speed straight motion.
    ///
    /// With `m = max(1, ⌈(‖p − g‖ − r_g) / v_max⌉)` steps to go,
    /// `V = γ^(m−1)·R_goal − c·(1 − γ^m)/(1 − γ)`: the exact return of a
    /// straight full-speed approach, including the arrival step.
    pub fn critic(&self, task: &TaskSpec, p: [f64; 2]) -> f64 {
        let n = (dist(p, task.goal) - task.goal_radius) / self.max_speed;
        let m = n.ceil().max(1.0);
        self.gamma.powf(m - 1.0) * self.goal_reward
            - self.step_cost * (1.0 - self.gamma.powf(m)) / (1.0 - self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkKind {
    Good,
    HazardSeeking,
    Destabilizing,
    RandomHeading,
}

impl ChunkKind {
    pub fn is_good(self) -> bool {
        self == ChunkKind::Good
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicyConfig {
    /// Probability a sampled chunk is good.
    pub quality: f64,
    pub k: usize,
    /// Relative weights of the bad kinds: hazard-seeking, destabilizing,
    /// random heading.
    pub bad_mix: [f64; 3],
    /// Heading jitter of good chunks, radians.
    pub heading_jitter: f64,
    /// Hazard clearance below which good chunks steer away.
    pub avoid_margin: f64,
    pub seed: u64,
}

impl Default for ToyPolicyConfig {
    fn default() -> Self {
        ToyPolicyConfig {
            quality: 0.8,
            k: 5,
            bad_mix: [0.35, 0.25, 0.4],
            heading_jitter: 0.15,
            avoid_margin: 0.3,
            seed: 0,
        }
    }
}

impl ToyPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(Error::Config(format!(
                "quality {} not in [0,1]",
                self.quality
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.bad_mix.iter().any(|w| !(*w >= 0.0)) || self.bad_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "bad_mix weights must be >= 0 with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWMConfig {
    /// Prediction error added by every imagined rollout.
    pub drift_per_call: f64,
    /// Extra error for rolling out a bad chunk.
    pub drift_per_bad: f64,
    pub render_cost: f64,
}

impl Default for ToyWMConfig {
    fn default() -> Self {
        ToyWMConfig {
            drift_per_call: 0.01,
            drift_per_bad: 0.05,
            render_cost: 1.0,
        }
    }
}

impl ToyWMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drift_per_call >= 0.0 && self.drift_per_bad >= 0.0 && self.render_cost >= 0.0) {
            return Err(Error::Config(
                "world-model drift and cost must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n < 1e-12 {
        [0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n]
    }
}

fn rotate(v: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pos: [f64; 2],
    /// Steps taken so far.
    pub t: usize,
    /// Step index at which a destabilized mass fails.
    pub fail_at: Option<usize>,
}

impl EnvState {
    pub fn start(env: &ToyEnvConfig, task: &TaskSpec, r: &mut StreamRng) -> Self {
        let j = env.start_jitter;
        let mut pos = task.start;
        if j > 0.0 {
            pos[0] += r.random_range(-j..=j);
            pos[1] += r.random_range(-j..=j);
        }
        EnvState {
            pos: clamp_pos(pos, env.extent),
            t: 0,
            fail_at: None,
        }
    }
}

fn clamp_pos(p: [f64; 2], extent: f64) -> [f64; 2] {
    [p[0].clamp(0.0, extent), p[1].clamp(0.0, extent)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Success,
    Collision,
    Destabilized,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStep {
    pub rewards: Vec<f64>,
    pub collisions: Vec<bool>,
    /// Position after each executed step.
    pub positions: Vec<[f64; 2]>,
    pub state: EnvState,
    pub terminal: Option<Terminal>,
}

/// Integrates a chunk step by step, stopping early on a terminal event.
/// `noise` is `None` for noise-free (imagined) integration.
pub fn env_step_chunk(
    env: &ToyEnvConfig,
    task: &TaskSpec,
    state: EnvState,
    chunk: &ActionChunk,
    mut noise: Option<&mut StreamRng>,
) -> ChunkStep {
    let mut s = state;
    let mut out = ChunkStep {
        rewards: Vec::with_capacity(chunk.len()),
        collisions: Vec::with_capacity(chunk.len()),
        positions: Vec::with_capacity(chunk.len()),
        state: s,
        terminal: None,
    };
    let jolt = chunk
        .actions
        .iter()
        .any(|a| a.get(2).is_some_and(|j| *j > 0.5));
    if jolt && s.fail_at.is_none() {
        s.fail_at = Some(s.t + chunk.len() - 1 + env.destabilize_delay);
    }
    for a in &chunk.actions {
        let v = [a[0], a[1]];
        let speed = v[0].hypot(v[1]);
        let v = if speed > env.max_speed {
            [v[0] * env.max_speed / speed, v[1] * env.max_speed / speed]
        } else {
            v
        };
        let mut p = [s.pos[0] + v[0], s.pos[1] + v[1]];
        if let Some(r) = noise.as_deref_mut() {
            if env.noise_sigma > 0.0 {
                p[0] += env.noise_sigma * r.sample::<f64, _>(StandardNormal);
                p[1] += env.noise_sigma * r.sample::<f64, _>(StandardNormal);
            }
        }
        s.pos = clamp_pos(p, env.extent);
        let step = s.t;
        s.t += 1;
        let mut reward = -env.step_cost;
        let collided = task.hazards.iter().any(|h| h.contains(s.pos));
        let terminal = if collided {
            reward += env.collision_reward;
            Some(Terminal::Collision)
        } else if dist(s.pos, task.goal) <= task.goal_radius {
            reward += env.goal_reward;
            Some(Terminal::Success)
        } else if s.fail_at == Some(step) {
            reward += env.fail_reward;
            Some(Terminal::Destabilized)
        } else if s.t >= env.max_steps {
            Some(Terminal::Timeout)
        } else {
            None
        };
        out.rewards.push(reward);
        out.collisions.push(collided);
        out.positions.push(s.pos);
        if terminal.is_some() {
            out.terminal = terminal;
            break;
        }
    }
    out.state = s;
    out
}

/// A policy sample with its hidden quality tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sample_id: String,
    pub chunk: ActionChunk,
    pub kind: ChunkKind,
}

/// Draws one candidate chunk. The draw is a pure function of
/// `(policy.seed, coords)`.
pub fn sample_candidate(
    env: &ToyEnvConfig,
    task: &TaskSpec,
    pos: [f64; 2],
    policy: &ToyPolicyConfig,
    coords: &[u64],
    sample_id: String,
) -> Candidate {
    let noise_seed = rng::derive_seed_ints(policy.seed, coords);
    let mut r = rng::stream_ints(noise_seed, &[0]);
    let kind = if r.random::<f64>() < policy.quality {
        ChunkKind::Good
    } else {
        let total: f64 = policy.bad_mix.iter().sum();
        let u = r.random::<f64>() * total;
        if u < policy.bad_mix[0] {
            ChunkKind::HazardSeeking
        } else if u < policy.bad_mix[0] + policy.bad_mix[1] {
            ChunkKind::Destabilizing
        } else {
            ChunkKind::RandomHeading
        }
    };
    let vmax = env.max_speed;
    let actions = match kind {
        ChunkKind::Good | ChunkKind::Destabilizing => {
            let jitter = policy.heading_jitter * r.sample::<f64, _>(StandardNormal);
            let jolt = if kind == ChunkKind::Destabilizing {
                1.0
            } else {
                0.0
            };
            let mut p = pos;
            (0..policy.k)
                .map(|_| {
                    let d = rotate(steer(task, p, policy.avoid_margin), jitter);
                    p = [p[0] + vmax * d[0], p[1] + vmax * d[1]];
                    vec![vmax * d[0], vmax * d[1], jolt]
                })
                .collect()
        }
        ChunkKind::HazardSeeking => {
            let target = task
                .hazards
                .iter()
                .min_by(|a, b| dist(pos, [a.x, a.y]).total_cmp(&dist(pos, [b.x, b.y])))
                .map_or(task.goal, |h| [h.x, h.y]);
            let d = unit([target[0] - pos[0], target[1] - pos[1]]);
            vec![vec![vmax * d[0], vmax * d[1], 0.0]; policy.k]
        }
        ChunkKind::RandomHeading => {
            let a = r.random_range(0.0..std::f64::consts::TAU);
            vec![vec![vmax * a.cos(), vmax * a.sin(), 0.0]; policy.k]
        }
    };
    Candidate {
        sample_id,
        chunk: ActionChunk {
            actions,
            noise_seed,
        },
        kind,
    }
}

/// Goal attraction plus linear repulsion inside the avoidance margin.
fn steer(task: &TaskSpec, p: [f64; 2], margin: f64) -> [f64; 2] {
    let g = unit([task.goal[0] - p[0], task.goal[1] - p[1]]);
    let mut d = g;
    for h in &task.hazards {
        let away = [p[0] - h.x, p[1] - h.y];
        let clearance = away[0].hypot(away[1]) - h.r;
        if clearance < margin {
            let w = 2.0 * (margin - clearance.max(0.0)) / margin;
            let a = unit(away);
            // slide tangentially around the hazard toward the goal side
            let tangent = if a[1] * g[0] - a[0] * g[1] >= 0.0 {
                [a[1], -a[0]]
            } else {
                [-a[1], a[0]]
            };
            d = [
                d[0] + w * (a[0] + tangent[0]),
                d[1] + w * (a[1] + tangent[1]),
            ];
        }
    }
    unit(d)
}

/// Kinematic world model with bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub calls: usize,
    pub drift: f64,
    pub cost: f64,
}

impl WorldModel {
    /// Books one rollout without running it.
    pub fn charge(&mut self, cfg: &ToyWMConfig, good: bool) {
        self.calls += 1;
        self.cost += cfg.render_cost;
        self.drift += cfg.drift_per_call;
        if !good {
            self.drift += cfg.drift_per_bad;
        }
    }

    /// Predicts the next `K` positions by noise-free integration.
    pub fn imagine(
        &mut self,
        cfg: &ToyWMConfig,
        env: &ToyEnvConfig,
        task: &TaskSpec,
        state: EnvState,
        cand: &Candidate,
    ) -> ChunkStep {
        self.charge(cfg, cand.kind.is_good());
        env_step_chunk(env, task, state, &cand.chunk, None)
    }
}
