//! Verifier-gated resampling at decision time.
//!
//! Before the warm-up step the policy's first candidate runs unchecked. After
//! it, candidates are drawn one at a time and scored; the first with
//! `p ≥ τ_p` is executed. If none of the `N` attempts passes, the candidate
//! with the highest predicted advantage is executed instead (ties go to the
//! earliest draw). In imagination mode only the executed chunk is sent to the
//! world model, and with truncation enabled a fallback below threshold ends
//! the imagined rollout without any world-model call.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::verifier::VerifierOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Physical,
    Imagination,
}

impl GateMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "physical" => Some(GateMode::Physical),
            "imagination" => Some(GateMode::Imagination),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateMode::Physical => "physical",
            GateMode::Imagination => "imagination",
        }
    }
}

/// Candidate-selection strategy of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Execute the policy's first candidate.
    Baseline,
    /// Draw `N` candidates and execute one chosen uniformly at random.
    RandomResample,
    /// Verifier-gated resampling.
    Gated,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::RandomResample, Arm::Gated];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Arm::Baseline),
            "random" | "random_resample" => Some(Arm::RandomResample),
            "gated" => Some(Arm::Gated),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::RandomResample => "random_resample",
            Arm::Gated => "gated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// First step index at which gating applies.
    pub warmup_steps: usize,
    pub pass_threshold: f64,
    pub max_attempts: usize,
    pub mode: GateMode,
    pub truncation: bool,
    /// Record wall-clock decision latency; off gives byte-identical logs.
    pub record_timing: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            warmup_steps: 20,
            pass_threshold: 0.275,
            max_attempts: 5,
            mode: GateMode::Physical,
            truncation: false,
            record_timing: true,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pass_threshold) {
            return Err(Error::Config(format!(
                "pass_threshold {} not in [0,1]",
                self.pass_threshold
            )));
        }
        Ok(())
    }

    pub fn gate_active(&self, t: usize) -> bool {
        t >= self.warmup_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    ExecutedPass,
    ExecutedFallback,
    BypassedWarmup,
    Truncated,
    /// Chosen by a non-gated arm.
    ExecutedUngated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub p: f64,
    pub a_hat: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t: usize,
    pub outcome: Outcome,
    /// Candidates drawn from the policy.
    pub drawn: usize,
    /// Index of the executed candidate in draw order; `None` if truncated.
    pub chosen: Option<usize>,
    /// Verifier scores in draw order (monitor scores for ungated arms).
    pub attempts: Vec<Attempt>,
    /// World-model calls issued for this decision.
    pub imagination_calls: usize,
    pub wall_time_us: u64,
}

impl DecisionRecord {
    pub fn gated(&self) -> bool {
        matches!(
            self.outcome,
            Outcome::ExecutedPass | Outcome::ExecutedFallback | Outcome::Truncated
        )
    }

    pub fn verifier_calls(&self) -> usize {
        if self.gated() {
            self.attempts.len()
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decision<C> {
    pub record: DecisionRecord,
    /// The chunk to execute, or `None` when the imagined rollout is truncated.
    pub chosen: Option<C>,
}

/// Index of the highest predicted advantage, earliest on ties.
pub fn fallback_index(attempts: &[Attempt]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, a) in attempts.iter().enumerate() {
        match best {
            Some(b) if attempts[b].a_hat >= a.a_hat => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Selects a chunk for step `t`.
///
/// `draw(i)` returns the `i`-th candidate (or `None` if the sampler is
/// exhausted) and `score` runs the verifier. With `monitor` set, ungated arms
/// still score the executed chunk for logging. `selection_seed` keys the
/// random arm's choice.
pub fn decide<C>(
    arm: Arm,
    t: usize,
    cfg: &SchedulerConfig,
    selection_seed: u64,
    monitor: bool,
    mut draw: impl FnMut(usize) -> Option<C>,
    mut score: impl FnMut(&C) -> Result<VerifierOutput>,
) -> Result<Decision<C>> {
    let start = cfg.record_timing.then(Instant::now);
    let imagination = cfg.mode == GateMode::Imagination;
    let mut take =
        |i: usize, needed: usize| draw(i).ok_or(Error::SamplerExhausted { drawn: i, needed });
    let attempt = |o: VerifierOutput| Attempt {
        p: o.p,
        a_hat: o.a_hat,
        passed: o.p >= cfg.pass_threshold,
    };

    let (outcome, drawn, chosen_idx, attempts, chosen) = if arm == Arm::Gated && cfg.gate_active(t)
    {
        let n = cfg.max_attempts;
        let mut cands = Vec::with_capacity(n);
        let mut attempts = Vec::with_capacity(n);
        let mut accepted = None;
        for i in 0..n {
            let c = take(i, n)?;
            let a = attempt(score(&c)?);
            attempts.push(a);
            cands.push(c);
            if a.passed {
                accepted = Some(i);
                break;
            }
        }
        let drawn = cands.len();
        match accepted {
            Some(i) => {
                let c = cands.swap_remove(i);
                (Outcome::ExecutedPass, drawn, Some(i), attempts, Some(c))
            }
            None => {
                let i = fallback_index(&attempts).expect("at least one attempt");
                if imagination && cfg.truncation {
                    (Outcome::Truncated, drawn, None, attempts, None)
                } else {
                    let c = cands.swap_remove(i);
                    (Outcome::ExecutedFallback, drawn, Some(i), attempts, Some(c))
                }
            }
        }
    } else {
        let outcome = if arm == Arm::Gated {
            Outcome::BypassedWarmup
        } else {
            Outcome::ExecutedUngated
        };
        let (drawn, idx, c) = if arm == Arm::RandomResample {
            let n = cfg.max_attempts;
            let mut cands: Vec<C> = (0..n).map(|i| take(i, n)).collect::<Result<_>>()?;
            let mut r = rng::stream_ints(selection_seed, &[t as u64]);
            let idx = r.random_range(0..n);
            (n, idx, cands.swap_remove(idx))
        } else {
            (1, 0, take(0, 1)?)
        };
        let attempts = if monitor {
            vec![attempt(score(&c)?)]
        } else {
            Vec::new()
        };
        (outcome, drawn, Some(idx), attempts, Some(c))
    };

    let imagination_calls = usize::from(imagination && chosen.is_some());
    let wall_time_us = start.map_or(0, |s| s.elapsed().as_micros() as u64);
    Ok(Decision {
        record: DecisionRecord {
            t,
            outcome,
            drawn,
            chosen: chosen_idx,
            attempts,
            imagination_calls,
            wall_time_us,
        },
        chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(p: f64, a_hat: f64) -> VerifierOutput {
        VerifierOutput {
            p,
            a_hat,
            logit: (p / (1.0 - p)).ln(),
        }
    }

    fn run(
        arm: Arm,
        t: usize,
        cfg: &SchedulerConfig,
        scores: &[(f64, f64)],
    ) -> (Decision<usize>, usize, usize) {
        let mut draws = 0;
        let mut calls = 0;
        let d = decide(
            arm,
            t,
            cfg,
            1,
            false,
            |i| {
                draws += 1;
                (i < scores.len()).then_some(i)
            },
            |&c| {
                calls += 1;
                Ok(out(scores[c].0, scores[c].1))
            },
        )
        .unwrap();
        (d, draws, calls)
    }

    fn cfg() -> SchedulerConfig {
        SchedulerConfig {
            record_timing: false,
            ..SchedulerConfig::default()
        }
    }

    #[test]
    fn accepts_first_passing_candidate() {
        let s = [(0.1, 0.0), (0.3, -1.0), (0.9, 2.0), (0.1, 0.0), (0.1, 0.0)];
        let (d, draws, calls) = run(Arm::Gated, 25, &cfg(), &s);
        assert_eq!(d.record.outcome, Outcome::ExecutedPass);
        assert_eq!(d.chosen, Some(1));
        assert_eq!((draws, calls), (2, 2));
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = [(0.275, 0.0)];
        let (d, _, _) = run(Arm::Gated, 20, &cfg(), &s);
        assert_eq!(d.record.outcome, Outcome::ExecutedPass);
    }

    #[test]
    fn fallback_picks_max_advantage_earliest_on_tie() {
        let s = [(0.1, 0.0), (0.2, 0.5), (0.1, -3.0), (0.0, 0.5), (0.27, 0.1)];
        let (d, draws, calls) = run(Arm::Gated, 30, &cfg(), &s);
        assert_eq!(d.record.outcome, Outcome::ExecutedFallback);
        assert_eq!(d.chosen, Some(1));
        assert_eq!((draws, calls), (5, 5));
    }

    #[test]
    fn warmup_bypasses_verifier() {
        let s = [(0.0, 0.0)];
        let (d, draws, calls) = run(Arm::Gated, 19, &cfg(), &s);
        assert_eq!(d.record.outcome, Outcome::BypassedWarmup);
        assert_eq!((draws, calls), (1, 0));
        assert_eq!(d.chosen, Some(0));
    }

    #[test]
    fn imagination_rules() {
        let mut c = cfg();
        c.mode = GateMode::Imagination;
        let fail = [(0.1, 0.0); 5];
        let (d, _, _) = run(Arm::Gated, 30, &c, &fail);
        assert_eq!(d.record.outcome, Outcome::ExecutedFallback);
        assert_eq!(d.record.imagination_calls, 1);
        c.truncation = true;
        let (d, _, _) = run(Arm::Gated, 30, &c, &fail);
        assert_eq!(d.record.outcome, Outcome::Truncated);
        assert_eq!(d.record.imagination_calls, 0);
        assert!(d.chosen.is_none());
        let (d, _, _) = run(Arm::Gated, 30, &c, &[(0.5, 0.0)]);
        assert_eq!(d.record.imagination_calls, 1);
    }

    #[test]
    fn exhausted_sampler_is_an_error() {
        let res = decide(
            Arm::Gated,
            30,
            &cfg(),
            0,
            false,
            |i| (i < 2).then_some(i),
            |_| Ok(out(0.1, 0.0)),
        );
        assert!(matches!(
            res,
            Err(Error::SamplerExhausted {
                drawn: 2,
                needed: 5
            })
        ));
    }

    #[test]
    fn ungated_arms() {
        let s = [(0.1, 0.0); 5];
        let (d, draws, calls) = run(Arm::Baseline, 40, &cfg(), &s);
        assert_eq!(
            (d.record.outcome, d.chosen, draws, calls),
            (Outcome::ExecutedUngated, Some(0), 1, 0)
        );
        let (d, draws, calls) = run(Arm::RandomResample, 40, &cfg(), &s);
        assert_eq!((draws, calls), (5, 0));
        let (d2, _, _) = run(Arm::RandomResample, 40, &cfg(), &s);
        assert_eq!(d.chosen, d2.chosen);
        let picks: std::collections::BTreeSet<usize> = (0..200)
            .map(|t| run(Arm::RandomResample, t, &cfg(), &s).0.chosen.unwrap())
            .collect();
        assert_eq!(picks.len(), 5);
    }

    #[test]
    fn monitor_scores_without_changing_choice() {
        let d = decide(Arm::Baseline, 40, &cfg(), 0, true, Some, |_| {
            Ok(out(0.2, 0.0))
        })
        .unwrap();
        assert_eq!(d.record.attempts.len(), 1);
        assert_eq!(d.record.verifier_calls(), 0);
        assert_eq!(d.chosen, Some(0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(512))]
            #[test]
            fn gated_decision_invariants(
                t in 0usize..60,
                scores in prop::collection::vec((0.0f64..1.0, -3.0f64..3.0), 5),
                imagination in any::<bool>(),
                truncation in any::<bool>(),
            ) {
                let mut c = cfg();
                if imagination { c.mode = GateMode::Imagination; }
                c.truncation = truncation;
                let (d, draws, calls) = run(Arm::Gated, t, &c, &scores);
                let r = &d.record;
                if t < c.warmup_steps {
                    prop_assert_eq!(calls, 0);
                    prop_assert_eq!(r.outcome, Outcome::BypassedWarmup);
                    return Ok(());
                }
                let first = scores.iter().position(|s| s.0 >= c.pass_threshold);
                match first {
                    Some(i) => {
                        prop_assert_eq!(calls, i + 1);
                        prop_assert_eq!(draws, i + 1);
                        prop_assert_eq!(d.chosen, Some(i));
                        prop_assert!(scores[i].0 >= c.pass_threshold);
                    }
                    None => {
                        prop_assert_eq!(calls, 5);
                        if imagination && truncation {
                            prop_assert_eq!(r.outcome, Outcome::Truncated);
                            prop_assert_eq!(r.imagination_calls, 0);
                        } else {
                            let k = d.chosen.unwrap();
                            prop_assert!(scores.iter().all(|s| s.1 <= scores[k].1));
                            prop_assert!(scores[..k].iter().all(|s| s.1 < scores[k].1));
                        }
                    }
                }
                // a rejected candidate is never executed or imagined
                if let Some(k) = d.chosen {
                    if r.outcome == Outcome::ExecutedPass {
                        prop_assert!(r.attempts[k].passed);
                    }
                }
                prop_assert_eq!(r.imagination_calls, usize::from(imagination && d.chosen.is_some()));
            }
        }
    }
}
