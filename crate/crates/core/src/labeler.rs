//! Safety-aware supervision signals from rollout traces.
//!
//! For every window `[t, t+K)` of an episode the labeler computes the K-step
//! chunk advantage (with the bootstrap term masked out when a collision
//! happens inside the window), subtracts an exponentially decayed penalty for
//! windows that end shortly before an episode failure, standardizes the result
//! within each task buffer, and thresholds it into a binary pass label.
//!
//! Collision flag `collision[i]` is raised while executing step `i`, i.e. on
//! the transition into state `i+1`. The mask for window `t` therefore covers
//! `collision[t..t+K]`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_model::{ChunkSample, EpisodeTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    /// Chunk length in steps.
    pub k: usize,
    pub gamma: f64,
    /// Failure backtrack window `W` in steps.
    pub backtrack_window: usize,
    /// Penalty decay `κ` in steps.
    pub decay: f64,
    pub fail_weight: f64,
    pub eps: f64,
    pub tau_a: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            k: 5,
            gamma: 0.99,
            backtrack_window: 20,
            decay: 3.0,
            fail_weight: 1.0,
            eps: 1e-4,
            tau_a: -0.21,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0,1)", self.gamma)));
        }
        if !(self.decay > 0.0) {
            return Err(Error::Config(format!("kappa {} must be > 0", self.decay)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be > 0", self.eps)));
        }
        if !(self.fail_weight >= 0.0) {
            return Err(Error::Config("lambda_fail must be >= 0".into()));
        }
        if !self.tau_a.is_finite() {
            return Err(Error::Config("tau_A must be finite".into()));
        }
        Ok(())
    }
}

fn check_window(trace: &EpisodeTrace, t: usize, k: usize) -> Result<()> {
    if t + k > trace.horizon {
        return Err(Error::WindowOutOfRange {
            t,
            k,
            horizon: trace.horizon,
        });
    }
    Ok(())
}

/// 1 when no collision flag is set in `collision[t..t+k]`, else 0.
pub fn safety_mask(trace: &EpisodeTrace, t: usize, k: usize) -> Result<f64> {
    check_window(trace, t, k)?;
    let hit = trace.collision[t..t + k].iter().any(|&c| c);
    Ok(if hit { 0.0 } else { 1.0 })
}

pub fn chunk_advantage(trace: &EpisodeTrace, t: usize, cfg: &LabelerConfig) -> Result<f64> {
    let k = cfg.k;
    let mask = safety_mask(trace, t, k)?;
    let mut discount = 1.0;
    let mut ret = 0.0;
    for r in &trace.rewards[t..t + k] {
        ret += discount * r;
        discount *= cfg.gamma;
    }
    let a = ret + discount * mask * trace.critic_values[t + k] - trace.critic_values[t];
    if !a.is_finite() {
        return Err(Error::validation(
            trace.episode_id.as_str(),
            "rewards",
            format!("non-finite advantage at t={t}"),
        ));
    }
    Ok(a)
}

/// Exponentially decayed penalty for windows ending at most `W` steps before
/// the failure step. Zero for successful episodes.
pub fn failure_penalty(trace: &EpisodeTrace, t: usize, cfg: &LabelerConfig) -> Result<f64> {
    check_window(trace, t, cfg.k)?;
    let Some(fail) = trace.fail_step.filter(|_| trace.failed) else {
        return Ok(0.0);
    };
    let end = t + cfg.k;
    if fail < end || fail - end > cfg.backtrack_window {
        return Ok(0.0);
    }
    Ok((-((fail - end) as f64) / cfg.decay).exp())
}

pub fn refined_advantage(trace: &EpisodeTrace, t: usize, cfg: &LabelerConfig) -> Result<f64> {
    let a = chunk_advantage(trace, t, cfg)?;
    let f = failure_penalty(trace, t, cfg)?;
    Ok(a - cfg.fail_weight * f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBufferStats {
    pub task_id: String,
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub count: usize,
}

impl TaskBufferStats {
    /// All advantages in the buffer were identical; normalized values then
    /// scale with `1/ε`.
    pub fn is_degenerate(&self) -> bool {
        self.sigma == 0.0
    }
}

pub fn fit_task_stats(
    advantages: &BTreeMap<String, Vec<f64>>,
) -> Result<BTreeMap<String, TaskBufferStats>> {
    advantages
        .iter()
        .map(|(task, buf)| {
            if buf.is_empty() {
                return Err(Error::EmptyBuffer(task.clone()));
            }
            let n = buf.len() as f64;
            let mu = buf.iter().sum::<f64>() / n;
            let var = buf.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n;
            let stats = TaskBufferStats {
                task_id: task.clone(),
                mu,
                sigma: var.sqrt(),
                count: buf.len(),
            };
            Ok((task.clone(), stats))
        })
        .collect()
}

pub fn normalize(refined: f64, stats: &TaskBufferStats, eps: f64) -> f64 {
    (refined - stats.mu) / (stats.sigma + eps)
}

/// `(y_binary, y_cont)`; the threshold is inclusive.
pub fn make_labels(normalized: f64, tau_a: f64) -> (u8, f64) {
    (u8::from(normalized >= tau_a), normalized)
}

/// Every intermediate quantity for one labeled window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLabel {
    pub episode_id: String,
    pub task_id: String,
    pub t: usize,
    pub advantage: f64,
    pub penalty: f64,
    pub refined: f64,
    pub normalized: f64,
    pub y_binary: u8,
}

impl WindowLabel {
    pub fn sample_id(&self) -> String {
        format!("{}:{}", self.episode_id, self.t)
    }

    pub fn to_stub(&self) -> ChunkSample {
        ChunkSample::stub(
            self.sample_id(),
            self.task_id.clone(),
            self.y_binary,
            self.normalized,
            self.refined,
        )
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub windows: Vec<WindowLabel>,
    pub stats: BTreeMap<String, TaskBufferStats>,
}

impl LabeledDataset {
    pub fn stubs(&self) -> Vec<ChunkSample> {
        self.windows.iter().map(WindowLabel::to_stub).collect()
    }

    pub fn positive_ratio(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let pos = self.windows.iter().filter(|w| w.y_binary == 1).count();
        pos as f64 / self.windows.len() as f64
    }
}

/// Labels every stride-1 window with `t + K <= T` across all traces.
///
/// Two passes: refined advantages for every window (parallel over episodes),
/// then per-task statistics in trace order, then normalization and labeling.
pub fn label_dataset(traces: &[EpisodeTrace], cfg: &LabelerConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let per_episode: Vec<Vec<(usize, f64, f64, f64)>> = traces
        .par_iter()
        .map(|ep| {
            ep.validate()?;
            let n = (ep.horizon + 1).saturating_sub(cfg.k);
            (0..n)
                .map(|t| {
                    let a = chunk_advantage(ep, t, cfg)?;
                    let f = failure_penalty(ep, t, cfg)?;
                    Ok((t, a, f, a - cfg.fail_weight * f))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut buffers: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (ep, windows) in traces.iter().zip(&per_episode) {
        let buf = buffers.entry(ep.task_id.clone()).or_default();
        buf.extend(windows.iter().map(|w| w.3));
    }
    buffers.retain(|_, b| !b.is_empty());
    let stats = fit_task_stats(&buffers)?;

    let windows = traces
        .par_iter()
        .zip(per_episode.par_iter())
        .flat_map_iter(|(ep, windows)| {
            let s = &stats;
            windows.iter().map(move |&(t, a, f, refined)| {
                let norm = normalize(refined, &s[&ep.task_id], cfg.eps);
                let (y, _) = make_labels(norm, cfg.tau_a);
                WindowLabel {
                    episode_id: ep.episode_id.clone(),
                    task_id: ep.task_id.clone(),
                    t,
                    advantage: a,
                    penalty: f,
                    refined,
                    normalized: norm,
                    y_binary: y,
                }
            })
        })
        .collect();
    Ok(LabeledDataset { windows, stats })
}

/// Stats sidecar: `task_id,mu,sigma,count`.
pub fn write_stats_csv(stats: &BTreeMap<String, TaskBufferStats>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats.values() {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stats_csv(path: &Path) -> Result<BTreeMap<String, TaskBufferStats>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<TaskBufferStats>()
        .map(|row| {
            let s = row?;
            Ok((s.task_id.clone(), s))
        })
        .collect()
}

/// Human-readable summary of a labeled dataset, flagging degenerate buffers.
pub fn write_label_report(ds: &LabeledDataset, mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "windows: {}  positive ratio: {:.4}",
        ds.windows.len(),
        ds.positive_ratio()
    )?;
    for s in ds.stats.values() {
        let flag = if s.is_degenerate() {
            "  [degenerate: sigma=0]"
        } else {
            ""
        };
        writeln!(
            out,
            "task {}: mu={:.6} sigma={:.6} count={}{}",
            s.task_id, s.mu, s.sigma, s.count, flag
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rewards: Vec<f64>, values: Vec<f64>, collision: Vec<bool>) -> EpisodeTrace {
        EpisodeTrace {
            episode_id: "e".into(),
            task_id: "task".into(),
            horizon: rewards.len(),
            rewards,
            collision,
            critic_values: values,
            failed: false,
            fail_step: None,
            steps: vec![],
        }
    }

    fn cfg(k: usize, gamma: f64) -> LabelerConfig {
        LabelerConfig {
            k,
            gamma,
            ..LabelerConfig::default()
        }
    }

    #[test]
    fn defaults_match_table() {
        let c = LabelerConfig::default();
        assert_eq!((c.k, c.gamma, c.backtrack_window), (5, 0.99, 20));
        assert_eq!(
            (c.decay, c.fail_weight, c.eps, c.tau_a),
            (3.0, 1.0, 1e-4, -0.21)
        );
    }

    #[test]
    fn mask_cases() {
        let ep = trace(vec![0.0; 10], vec![0.0; 11], vec![false; 10]);
        assert_eq!(safety_mask(&ep, 0, 5).unwrap(), 1.0);
        let mut c = vec![false; 10];
        c[6] = true;
        let ep = trace(vec![0.0; 10], vec![0.0; 11], c);
        // window t=2 covers collision[2..7], last step included
        assert_eq!(safety_mask(&ep, 2, 5).unwrap(), 0.0);
        // collision strictly before the window
        assert_eq!(safety_mask(&ep, 7, 3).unwrap(), 1.0);
        assert!(matches!(
            safety_mask(&ep, 8, 5),
            Err(Error::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn advantage_examples() {
        let ep = trace(vec![0.0; 6], vec![0.0; 7], vec![false; 6]);
        assert_eq!(chunk_advantage(&ep, 0, &cfg(5, 0.99)).unwrap(), 0.0);

        let ep = trace(vec![1.0, 1.0], vec![0.0, 7.0, 4.0], vec![false, false]);
        let a = chunk_advantage(&ep, 0, &cfg(2, 0.5)).unwrap();
        assert!((a - 2.5).abs() < 1e-12);

        let ep = trace(vec![1.0, 1.0], vec![0.0, 7.0, 4.0], vec![false, true]);
        let a = chunk_advantage(&ep, 0, &cfg(2, 0.5)).unwrap();
        assert!((a - 1.5).abs() < 1e-12);
    }

    fn failed_trace(t: usize, fail: usize) -> EpisodeTrace {
        let mut ep = trace(vec![0.0; t], vec![0.0; t + 1], vec![false; t]);
        ep.failed = true;
        ep.fail_step = Some(fail);
        ep
    }

    #[test]
    fn penalty_examples() {
        let c = LabelerConfig::default();
        let ok = trace(vec![0.0; 30], vec![0.0; 31], vec![false; 30]);
        assert_eq!(failure_penalty(&ok, 3, &c).unwrap(), 0.0);

        let ep = failed_trace(30, 20);
        assert_eq!(failure_penalty(&ep, 15, &c).unwrap(), 1.0);
        let f = failure_penalty(&ep, 12, &c).unwrap();
        assert!((f - (-1.0f64).exp()).abs() < 1e-12);
        assert!((f - 0.367879).abs() < 1e-6);
        // window ends after the failure
        assert_eq!(failure_penalty(&ep, 16, &c).unwrap(), 0.0);
        // beyond backtrack window: T_fail - (t+K) = 21
        let ep = failed_trace(40, 30);
        assert_eq!(failure_penalty(&ep, 4, &c).unwrap(), 0.0);
        assert!(failure_penalty(&ep, 5, &c).unwrap() > 0.0);
    }

    #[test]
    fn refined_examples() {
        let mut c = LabelerConfig::default();
        let ep = failed_trace(30, 20);
        c.fail_weight = 0.0;
        assert_eq!(
            refined_advantage(&ep, 12, &c).unwrap(),
            chunk_advantage(&ep, 12, &c).unwrap()
        );
        c.fail_weight = 1.0;
        let r = refined_advantage(&ep, 12, &c).unwrap();
        assert!((r + 0.367879).abs() < 1e-6);

        // A = 2.5 with the failure right at the window end (F = 1)
        let mut ep = trace(
            vec![1.0, 1.0, 0.0],
            vec![0.0, 7.0, 4.0, 0.0],
            vec![false; 3],
        );
        ep.failed = true;
        ep.fail_step = Some(2);
        let c2 = LabelerConfig {
            k: 2,
            gamma: 0.5,
            ..LabelerConfig::default()
        };
        assert_eq!(failure_penalty(&ep, 0, &c2).unwrap(), 1.0);
        let r = refined_advantage(&ep, 0, &c2).unwrap();
        assert!((r - 1.5).abs() < 1e-12);
    }

    #[test]
    fn stats_examples() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![2.5, 2.5, 2.5]);
        m.insert("b".to_string(), vec![1.0, 3.0]);
        let s = fit_task_stats(&m).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s["a"].mu, s["a"].sigma, s["a"].count), (2.5, 0.0, 3));
        assert!(s["a"].is_degenerate());
        assert_eq!((s["b"].mu, s["b"].sigma), (2.0, 1.0));

        m.insert("c".to_string(), vec![]);
        assert!(matches!(fit_task_stats(&m), Err(Error::EmptyBuffer(t)) if t == "c"));
    }

    #[test]
    fn normalize_examples() {
        let s = TaskBufferStats {
            task_id: "b".into(),
            mu: 2.0,
            sigma: 1.0,
            count: 2,
        };
        assert_eq!(normalize(2.0, &s, 1e-4), 0.0);
        assert!((normalize(3.0, &s, 1e-4) - 1.0 / 1.0001).abs() < 1e-12);
        let flat = TaskBufferStats {
            sigma: 0.0,
            ..s.clone()
        };
        assert!((normalize(3.0, &flat, 1e-4) - 1e4).abs() < 1e-6);
    }

    #[test]
    fn label_examples() {
        assert_eq!(make_labels(-0.21, -0.21), (1, -0.21));
        assert_eq!(make_labels(-0.5, -0.21), (0, -0.5));
        assert_eq!(make_labels(2.0, -0.21), (1, 2.0));
    }

    #[test]
    fn window_count() {
        let ep = trace(vec![0.1; 10], vec![0.0; 11], vec![false; 10]);
        let ds = label_dataset(&[ep], &LabelerConfig::default()).unwrap();
        let ts: Vec<_> = ds.windows.iter().map(|w| w.t).collect();
        assert_eq!(ts, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn short_episode_yields_no_windows() {
        let ep = trace(vec![0.1; 3], vec![0.0; 4], vec![false; 3]);
        let other = trace(vec![0.1; 6], vec![0.0; 7], vec![false; 6]);
        let mut other = other;
        other.task_id = "other".into();
        let ds = label_dataset(&[ep, other], &LabelerConfig::default()).unwrap();
        assert_eq!(ds.windows.len(), 2);
        assert_eq!(ds.stats.len(), 1);
    }

    #[test]
    fn stats_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![0.1, 0.7, -2.0]);
        m.insert("b".to_string(), vec![1.0, 3.0]);
        let s = fit_task_stats(&m).unwrap();
        write_stats_csv(&s, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("task_id,mu,sigma,count\n"));
        assert_eq!(read_stats_csv(&p).unwrap(), s);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_trace() -> impl Strategy<Value = EpisodeTrace> {
            (6usize..20).prop_flat_map(|t| {
                (
                    prop::collection::vec(-1.0f64..1.0, t),
                    prop::collection::vec(-2.0f64..2.0, t + 1),
                    prop::collection::vec(prop::bool::weighted(0.1), t),
                    prop::option::of(0..t),
                )
                    .prop_map(move |(r, v, c, fail)| EpisodeTrace {
                        episode_id: "p".into(),
                        task_id: "task".into(),
                        horizon: t,
                        rewards: r,
                        collision: c,
                        critic_values: v,
                        failed: fail.is_some(),
                        fail_step: fail,
                        steps: vec![],
                    })
            })
        }

        proptest! {
            #[test]
            fn reward_increase_raises_advantage(ep in arb_trace(), i in 0usize..5, bump in 0.01f64..1.0) {
                let c = LabelerConfig::default();
                let t = 0;
                let mut up = ep.clone();
                up.rewards[t + i] += bump;
                let stats = TaskBufferStats { task_id: "task".into(), mu: 0.1, sigma: 0.7, count: 9 };
                let a0 = chunk_advantage(&ep, t, &c).unwrap();
                let a1 = chunk_advantage(&up, t, &c).unwrap();
                prop_assert!(a1 > a0);
                let r0 = refined_advantage(&ep, t, &c).unwrap();
                let r1 = refined_advantage(&up, t, &c).unwrap();
                prop_assert!(r1 > r0);
                prop_assert!(normalize(r1, &stats, c.eps) > normalize(r0, &stats, c.eps));
            }

            #[test]
            fn collision_never_raises_advantage(ep in arb_trace(), j in 0usize..5) {
                let c = LabelerConfig::default();
                let mut clean = ep.clone();
                clean.collision[..5].iter_mut().for_each(|x| *x = false);
                let mut hit = clean.clone();
                hit.collision[j] = true;
                let a_clean = chunk_advantage(&clean, 0, &c).unwrap();
                let a_hit = chunk_advantage(&hit, 0, &c).unwrap();
                // masking removes gamma^K * V[t+K]; only helps when that term is negative
                if clean.critic_values[5] >= 0.0 {
                    prop_assert!(a_hit <= a_clean);
                }
            }

            #[test]
            fn penalty_bounded_and_decreasing(t_fail in 25usize..60) {
                let c = LabelerConfig::default();
                let mut ep = failed_trace(60, t_fail);
                ep.fail_step = Some(t_fail);
                let mut prev = f64::INFINITY;
                // windows whose end moves away from the failure, gap 0..=W
                for gap in 0..=c.backtrack_window {
                    let t = t_fail - c.k - gap;
                    let f = failure_penalty(&ep, t, &c).unwrap();
                    prop_assert!((0.0..=1.0).contains(&f));
                    prop_assert!(f < prev);
                    prev = f;
                }
            }

            #[test]
            fn labels_consistent(eps in prop::collection::vec(arb_trace(), 1..4)) {
                let c = LabelerConfig::default();
                let ds = label_dataset(&eps, &c).unwrap();
                for w in &ds.windows {
                    prop_assert_eq!(w.y_binary == 1, w.normalized >= c.tau_a);
                }
            }
        }
    }
}
