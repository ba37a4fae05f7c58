//! Episode drivers: ungated trace generation for training data and
//! closed-loop runs of the three scheduling arms.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    env_step_chunk, sample_candidate, Candidate, ChunkKind, EnvState, Terminal, ToyEnvConfig,
    ToyPolicyConfig, ToyWMConfig, WorldModel,
};
use crate::error::{Error, Result};
use crate::features::{assemble_global, synth_blocks, FeatureBasis, SynthFeatureConfig, POOL_EPS};
use crate::metrics::{closed_loop_report, ClosedLoopReport, EpisodeSummary};
use crate::rng;
use crate::scheduler::{decide, Arm, DecisionRecord, GateMode, SchedulerConfig};
use crate::trace_model::{EpisodeTrace, StepRecord};
use crate::verifier::{VerifierOutput, VerifierParams};

/// Stream tags keeping per-purpose randomness apart.
const ENV_STREAM: u64 = 1;
const SELECT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGenConfig {
    pub episodes: usize,
    /// Candidates recorded per decision; the first one is executed.
    pub candidates_per_step: usize,
    /// When set, keep simulating until this many successful and this many
    /// unsuccessful episodes are collected (`episodes` is then ignored).
    pub outcome_quota: Option<usize>,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        TraceGenConfig {
            episodes: 120,
            candidates_per_step: 1,
            outcome_quota: None,
        }
    }
}

/// Hidden quality of a recorded candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTag {
    pub episode_id: String,
    pub t: usize,
    pub candidate: usize,
    pub executed: bool,
    pub kind: ChunkKind,
}

fn episode_id(task: &str, ep: usize) -> String {
    format!("{task}-{ep:05}")
}

fn simulate_trace(
    env: &ToyEnvConfig,
    policy: &ToyPolicyConfig,
    gen: &TraceGenConfig,
    ep: usize,
) -> (EpisodeTrace, Vec<QualityTag>) {
    let task = &env.tasks[ep % env.tasks.len()];
    let id = episode_id(&task.id, ep);
    let mut noise = rng::stream_ints(env.seed, &[ENV_STREAM, ep as u64]);
    let mut s = EnvState::start(env, task, &mut noise);
    let mut trace = EpisodeTrace {
        episode_id: id.clone(),
        task_id: task.id.clone(),
        horizon: 0,
        rewards: Vec::new(),
        collision: Vec::new(),
        critic_values: vec![env.critic(task, s.pos)],
        failed: false,
        fail_step: None,
        steps: Vec::new(),
    };
    let mut tags = Vec::new();
    let terminal = loop {
        let t = s.t;
        let cands: Vec<Candidate> = (0..gen.candidates_per_step.max(1))
            .map(|i| {
                sample_candidate(
                    env,
                    task,
                    s.pos,
                    policy,
                    &[ep as u64, t as u64, i as u64],
                    format!("{id}/{t}/{i}"),
                )
            })
            .collect();
        let out = env_step_chunk(env, task, s, &cands[0].chunk, Some(&mut noise));
        for (i, c) in cands.iter().enumerate() {
            tags.push(QualityTag {
                episode_id: id.clone(),
                t,
                candidate: i,
                executed: i == 0,
                kind: c.kind,
            });
        }
        trace.steps.push(StepRecord {
            t,
            candidates: cands.into_iter().map(|c| c.chunk).collect(),
            executed_index: 0,
        });
        trace.rewards.extend(&out.rewards);
        trace.collision.extend(&out.collisions);
        trace
            .critic_values
            .extend(out.positions.iter().map(|p| env.critic(task, *p)));
        s = out.state;
        if let Some(term) = out.terminal {
            break term;
        }
    };
    trace.horizon = trace.rewards.len();
    if terminal != Terminal::Timeout {
        *trace.critic_values.last_mut().expect("nonempty") = 0.0;
    }
    if matches!(terminal, Terminal::Collision | Terminal::Destabilized) {
        trace.failed = true;
        trace.fail_step = Some(trace.horizon - 1);
    }
    (trace, tags)
}

fn succeeded(trace: &EpisodeTrace) -> bool {
    !trace.failed && trace.critic_values.last() == Some(&0.0)
}

/// Ungated rollouts with analytic critic values and per-candidate tags.
pub fn generate_training_traces(
    env: &ToyEnvConfig,
    policy: &ToyPolicyConfig,
    gen: &TraceGenConfig,
) -> Result<(Vec<EpisodeTrace>, Vec<QualityTag>)> {
    env.validate()?;
    policy.validate()?;
    let Some(quota) = gen.outcome_quota else {
        let runs: Vec<_> = (0..gen.episodes)
            .into_par_iter()
            .map(|ep| simulate_trace(env, policy, gen, ep))
            .collect();
        let (traces, tags): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        return Ok((traces, tags.concat()));
    };
    let cap = quota.saturating_mul(200).max(1000);
    let (mut ok, mut bad) = (0, 0);
    let mut traces = Vec::new();
    let mut tags = Vec::new();
    let block = 64;
    let mut next = 0;
    while (ok < quota || bad < quota) && next < cap {
        let runs: Vec<_> = (next..next + block)
            .into_par_iter()
            .map(|ep| simulate_trace(env, policy, gen, ep))
            .collect();
        next += block;
        for (trace, tg) in runs {
            let slot = if succeeded(&trace) { &mut ok } else { &mut bad };
            if *slot < quota {
                *slot += 1;
                traces.push(trace);
                tags.extend(tg);
            }
        }
    }
    if ok < quota || bad < quota {
        return Err(Error::Config(format!(
            "outcome quota {quota} not reached after {cap} episodes ({ok} successes, {bad} failures)"
        )));
    }
    Ok((traces, tags))
}

pub fn write_tags_csv(tags: &[QualityTag], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in tags {
        w.serialize(t)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Verifier access for the closed loop.
pub trait CandidateScorer: Sync {
    fn score(&self, cand: &Candidate) -> Result<VerifierOutput>;
}

/// Scores candidates with a trained verifier on synthetic backbone features.
pub struct VerifierScorer<'a> {
    pub params: &'a VerifierParams,
    pub features: SynthFeatureConfig,
    basis: FeatureBasis,
}

impl<'a> VerifierScorer<'a> {
    pub fn new(params: &'a VerifierParams, features: SynthFeatureConfig) -> Result<Self> {
        features.validate()?;
        if params.dims.input != 4 * features.dim {
            return Err(Error::Shape(format!(
                "verifier expects {} inputs but features give {}",
                params.dims.input,
                4 * features.dim
            )));
        }
        let basis = features.basis();
        Ok(VerifierScorer {
            params,
            features,
            basis,
        })
    }
}

impl CandidateScorer for VerifierScorer<'_> {
    fn score(&self, cand: &Candidate) -> Result<VerifierOutput> {
        let y = u8::from(cand.kind.is_good());
        let blocks = synth_blocks(&cand.sample_id, y, &self.features, &self.basis);
        let z = assemble_global(
            &blocks,
            &self.features.present(),
            self.features.dim,
            POOL_EPS,
        )?;
        self.params.predict(&z.global)
    }
}

/// Reads the hidden tag: good chunks pass with certainty, bad ones fail.
pub struct OracleScorer;

impl CandidateScorer for OracleScorer {
    fn score(&self, cand: &Candidate) -> Result<VerifierOutput> {
        let good = cand.kind.is_good();
        Ok(VerifierOutput {
            p: if good { 1.0 } else { 0.0 },
            a_hat: if good { 1.0 } else { -1.0 },
            logit: if good {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
        })
    }
}

/// Constant confidence, e.g. accept-all (`1.0`) or reject-all (`0.0`).
pub struct ConstScorer(pub f64);

impl CandidateScorer for ConstScorer {
    fn score(&self, _: &Candidate) -> Result<VerifierOutput> {
        Ok(VerifierOutput {
            p: self.0,
            a_hat: 0.0,
            logit: (self.0 / (1.0 - self.0)).ln(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopConfig {
    pub episodes: usize,
    pub arm: Arm,
    pub scheduler: SchedulerConfig,
    /// Score the executed chunk of ungated arms for pass-rate analysis.
    pub monitor: bool,
    pub wm: ToyWMConfig,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            episodes: 300,
            arm: Arm::Gated,
            scheduler: SchedulerConfig::default(),
            monitor: false,
            wm: ToyWMConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRun {
    pub summary: EpisodeSummary,
    /// `None` when an imagined rollout was truncated.
    pub terminal: Option<Terminal>,
    pub truncated: bool,
    /// World model driven by the executed chunks (imagination mode only).
    pub wm: WorldModel,
    /// Accounting for a pipeline that imagines every drawn candidate.
    pub shadow_wm: WorldModel,
    /// Drawn candidates that were bad but not imagined.
    pub rejected_bad: usize,
    pub records: Vec<DecisionRecord>,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub episodes: Vec<EpisodeRun>,
    pub report: ClosedLoopReport,
}

fn run_episode(
    env: &ToyEnvConfig,
    policy: &ToyPolicyConfig,
    cfg: &ClosedLoopConfig,
    scorer: &dyn CandidateScorer,
    ep: usize,
) -> Result<EpisodeRun> {
    let task = &env.tasks[ep % env.tasks.len()];
    let imagination = cfg.scheduler.mode == GateMode::Imagination;
    let mut noise = rng::stream_ints(env.seed, &[ENV_STREAM, ep as u64]);
    let mut s = EnvState::start(env, task, &mut noise);
    let selection_seed = rng::derive_seed_ints(policy.seed, &[SELECT_STREAM, ep as u64]);
    let mut records = Vec::new();
    let mut wm = WorldModel::default();
    let mut shadow = WorldModel::default();
    let mut rejected_bad = 0;
    let mut terminal = None;
    let mut truncated = false;
    while terminal.is_none() {
        let t = s.t;
        let pos = s.pos;
        let mut drawn: Vec<ChunkKind> = Vec::new();
        let decision = decide(
            cfg.arm,
            t,
            &cfg.scheduler,
            selection_seed,
            cfg.monitor,
            |i| {
                let c = sample_candidate(
                    env,
                    task,
                    pos,
                    policy,
                    &[ep as u64, t as u64, i as u64],
                    format!("{}/{ep}/{t}/{i}", task.id),
                );
                drawn.push(c.kind);
                Some(c)
            },
            |c| scorer.score(c),
        )?;
        let mut record = decision.record;
        if imagination {
            for k in &drawn {
                shadow.charge(&cfg.wm, k.is_good());
            }
        }
        let Some(chosen) = decision.chosen else {
            rejected_bad += drawn.iter().filter(|k| !k.is_good()).count();
            records.push(record);
            truncated = true;
            break;
        };
        rejected_bad +=
            drawn.iter().filter(|k| !k.is_good()).count() - usize::from(!chosen.kind.is_good());
        let out = if imagination {
            wm.imagine(&cfg.wm, env, task, s, &chosen)
        } else {
            record.imagination_calls = 0;
            env_step_chunk(env, task, s, &chosen.chunk, Some(&mut noise))
        };
        records.push(record);
        s = out.state;
        terminal = out.terminal;
    }
    let success = terminal == Some(Terminal::Success);
    let summary = EpisodeSummary {
        episode: ep,
        task_id: task.id.clone(),
        success,
        failed: matches!(terminal, Some(Terminal::Collision | Terminal::Destabilized)),
        steps: if success { s.t } else { env.max_steps },
        decisions: records.len(),
        candidates_drawn: records.iter().map(|r| r.drawn).sum(),
        gated_decisions: records.iter().filter(|r| r.gated()).count(),
        verifier_calls: records.iter().map(DecisionRecord::verifier_calls).sum(),
        imagination_calls: records.iter().map(|r| r.imagination_calls).sum(),
        decision_time_us: records.iter().map(|r| r.wall_time_us).sum(),
        first_attempt_p: records
            .iter()
            .filter_map(|r| r.attempts.first().map(|a| a.p))
            .collect(),
    };
    Ok(EpisodeRun {
        summary,
        terminal,
        truncated,
        wm,
        shadow_wm: shadow,
        rejected_bad,
        records,
    })
}

/// Runs `cfg.episodes` episodes of one arm. Episode `i` uses task
/// `i mod tasks` and seeds keyed by `i`, so arms see identical environments
/// and identical candidate streams.
pub fn run_closed_loop(
    env: &ToyEnvConfig,
    policy: &ToyPolicyConfig,
    cfg: &ClosedLoopConfig,
    scorer: &dyn CandidateScorer,
) -> Result<ClosedLoopRun> {
    env.validate()?;
    policy.validate()?;
    cfg.scheduler.validate()?;
    cfg.wm.validate()?;
    if policy.k == 0 {
        return Err(Error::Config("chunk length must be >= 1".into()));
    }
    let episodes: Vec<EpisodeRun> = (0..cfg.episodes)
        .into_par_iter()
        .map(|ep| run_episode(env, policy, cfg, scorer, ep))
        .collect::<Result<_>>()?;
    let summaries: Vec<EpisodeSummary> = episodes.iter().map(|e| e.summary.clone()).collect();
    let report = closed_loop_report(cfg.arm.name(), &summaries);
    Ok(ClosedLoopRun { episodes, report })
}
