//! Evaluation metrics.
//!
//! Classification treats an invalid chunk (`y_binary = 0`) as the positive
//! class and a rejection (`p < τ_p`) as a positive prediction. A false pass is
//! an invalid chunk that clears the threshold; a false reject is a valid chunk
//! that does not.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    /// Invalid and rejected.
    pub tp: usize,
    /// Valid but rejected.
    pub fp: usize,
    /// Valid and passed.
    pub tn: usize,
    /// Invalid but passed.
    pub fn_: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub invalid_precision: f64,
    pub invalid_recall: f64,
    pub false_pass_rate: f64,
    pub false_reject_rate: f64,
    /// True when one of the two classes is absent; undefined rates are 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassificationReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        ClassificationReport {
            n,
            tp,
            fp,
            tn,
            fn_,
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            accuracy: ratio(tp + tn, n),
            invalid_precision: ratio(tp, tp + fp),
            invalid_recall: ratio(tp, tp + fn_),
            false_pass_rate: ratio(fn_, tp + fn_),
            false_reject_rate: ratio(fp, fp + tn),
            degenerate: tp + fn_ == 0 || fp + tn == 0,
        }
    }

    /// `scores` are confidences `p`, `labels` are `y_binary`.
    pub fn from_scores(scores: &[f64], labels: &[u8], pass_threshold: f64) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::EmptyBuffer("predictions".into()));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &y) in scores.iter().zip(labels) {
            let rejected = p < pass_threshold;
            match (y == 0, rejected) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        Ok(Self::from_counts(tp, fp, tn, fn_))
    }

    pub fn balanced_accuracy(&self) -> f64 {
        0.5 * (ratio(self.tp, self.tp + self.fn_) + ratio(self.tn, self.tn + self.fp))
    }

    pub fn to_text(&self) -> String {
        format!(
            "n={} tp={} fp={} tn={} fn={}\nf1={:.4} accuracy={:.4} invalid_precision={:.4} invalid_recall={:.4}\nfalse_pass_rate={:.4} false_reject_rate={:.4}{}\n",
            self.n,
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            self.f1,
            self.accuracy,
            self.invalid_precision,
            self.invalid_recall,
            self.false_pass_rate,
            self.false_reject_rate,
            if self.degenerate { "\nwarning: only one class present" } else { "" }
        )
    }
}

/// Per-episode share of decisions whose first candidate passed, averaged
/// within successful and unsuccessful episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassRateGap {
    pub success_mean: f64,
    pub failure_mean: f64,
    pub success_episodes: usize,
    pub failure_episodes: usize,
    pub gap: f64,
}

/// Each episode is its success flag and the first-candidate confidence of
/// every scored decision. Episodes with no scored decision are skipped.
pub fn trajectory_pass_rate(episodes: &[(bool, Vec<f64>)], pass_threshold: f64) -> PassRateGap {
    let mut groups = [(0.0, 0usize), (0.0, 0usize)];
    for (success, ps) in episodes {
        if ps.is_empty() {
            continue;
        }
        let passed = ps.iter().filter(|&&p| p >= pass_threshold).count();
        let mean = passed as f64 / ps.len() as f64;
        let g = &mut groups[usize::from(*success)];
        g.0 += mean;
        g.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    let success_mean = mean(groups[1]);
    let failure_mean = mean(groups[0]);
    PassRateGap {
        success_mean,
        failure_mean,
        success_episodes: groups[1].1,
        failure_episodes: groups[0].1,
        gap: success_mean - failure_mean,
    }
}

/// Outcome of one closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub task_id: String,
    pub success: bool,
    pub failed: bool,
    /// Environment steps, charged at the step cap for unsuccessful episodes.
    pub steps: usize,
    pub decisions: usize,
    pub candidates_drawn: usize,
    pub gated_decisions: usize,
    pub verifier_calls: usize,
    pub imagination_calls: usize,
    pub decision_time_us: u64,
    /// First-attempt confidence of each gated decision.
    pub first_attempt_p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub arm: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub failure_rate: f64,
    pub avg_steps: f64,
    /// Policy samples per decision, pooled over all episodes.
    pub avg_attempts_per_step: f64,
    /// Verifier calls per post-warm-up gated decision; 0 without any.
    pub avg_attempts_gated: f64,
    pub avg_decision_ms: f64,
    pub imagination_calls: usize,
    pub per_task_success: BTreeMap<String, f64>,
}

pub fn closed_loop_report(arm: &str, episodes: &[EpisodeSummary]) -> ClosedLoopReport {
    let n = episodes.len();
    let nf = n.max(1) as f64;
    let successes = episodes.iter().filter(|e| e.success).count();
    let failures = episodes.iter().filter(|e| e.failed).count();
    let gated: usize = episodes.iter().map(|e| e.gated_decisions).sum();
    let calls: usize = episodes.iter().map(|e| e.verifier_calls).sum();
    let decisions: usize = episodes.iter().map(|e| e.decisions).sum();
    let drawn: usize = episodes.iter().map(|e| e.candidates_drawn).sum();
    let time_us: u64 = episodes.iter().map(|e| e.decision_time_us).sum();
    let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for e in episodes {
        let c = per_task.entry(e.task_id.clone()).or_default();
        c.0 += usize::from(e.success);
        c.1 += 1;
    }
    ClosedLoopReport {
        arm: arm.to_string(),
        episodes: n,
        success_rate: successes as f64 / nf,
        failure_rate: failures as f64 / nf,
        avg_steps: episodes.iter().map(|e| e.steps as f64).sum::<f64>() / nf,
        avg_attempts_per_step: ratio(drawn, decisions),
        avg_attempts_gated: ratio(calls, gated),
        avg_decision_ms: if decisions == 0 {
            0.0
        } else {
            time_us as f64 / 1000.0 / decisions as f64
        },
        imagination_calls: episodes.iter().map(|e| e.imagination_calls).sum(),
        per_task_success: per_task
            .into_iter()
            .map(|(k, (s, t))| (k, ratio(s, t)))
            .collect(),
    }
}
