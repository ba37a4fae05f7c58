//! Rollout traces, labeled chunk samples, and their JSON Lines formats.
//!
//! Trace file: one episode per line with keys
//! `episode_id, task_id, T, rewards, collision, critic_values, failed, T_fail, steps`.
//! Sample file: one sample per line with keys
//! `sample_id, task_id, features, present, y_binary, y_cont, raw_advantage`.
//!
//! Both parsers validate every invariant on load and report the offending
//! record and field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input modalities, in the fixed concatenation order used by the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    State,
    Action,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Text,
        Modality::Image,
        Modality::State,
        Modality::Action,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::State => "state",
            Modality::Action => "action",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// One value per modality.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality<T> {
    pub text: T,
    pub image: T,
    pub state: T,
    pub action: T,
}

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        PerModality {
            text: f(Modality::Text),
            image: f(Modality::Image),
            state: f(Modality::State),
            action: f(Modality::Action),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL.into_iter().map(move |m| (m, &self[m]))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, &self[m]))
    }
}

impl<T> Index<Modality> for PerModality<T> {
    type Output = T;
    fn index(&self, m: Modality) -> &T {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
            Modality::State => &self.state,
            Modality::Action => &self.action,
        }
    }
}

impl<T> IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Text => &mut self.text,
            Modality::Image => &mut self.image,
            Modality::State => &mut self.state,
            Modality::Action => &mut self.action,
        }
    }
}

/// Token matrix, row-major: `tokens × d`.
pub type FeatureBlock = Vec<Vec<f64>>;

/// A candidate action chunk: `K` rows of `action_dim` controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionChunk {
    pub actions: Vec<Vec<f64>>,
    pub noise_seed: u64,
}

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: usize,
    pub candidates: Vec<ActionChunk>,
    pub executed_index: usize,
}

/// One recorded rollout.
///
/// `critic_values` has one entry per visited state including the state after
/// the last step, so it is one longer than `rewards`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeTrace {
    pub episode_id: String,
    pub task_id: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub rewards: Vec<f64>,
    pub collision: Vec<bool>,
    pub critic_values: Vec<f64>,
    pub failed: bool,
    #[serde(rename = "T_fail")]
    pub fail_step: Option<usize>,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn validate(&self) -> Result<()> {
        let id = self.episode_id.as_str();
        let t = self.horizon;
        if self.rewards.len() != t {
            return Err(Error::validation(
                id,
                "rewards",
                format!("rewards length {} != T {}", self.rewards.len(), t),
            ));
        }
        if self.collision.len() != t {
            return Err(Error::validation(
                id,
                "collision",
                format!("collision length {} != T {}", self.collision.len(), t),
            ));
        }
        if self.critic_values.len() != t + 1 {
            return Err(Error::validation(
                id,
                "critic_values",
                format!(
                    "critic_values length {} != T+1 {}",
                    self.critic_values.len(),
                    t + 1
                ),
            ));
        }
        if let Some(i) = self.rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::validation(
                id,
                "rewards",
                format!("non-finite at {i}"),
            ));
        }
        if let Some(i) = self.critic_values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                id,
                "critic_values",
                format!("non-finite at {i}"),
            ));
        }
        match (self.failed, self.fail_step) {
            (true, None) => {
                return Err(Error::validation(
                    id,
                    "T_fail",
                    "failed episode without T_fail",
                ))
            }
            (false, Some(_)) => {
                return Err(Error::validation(
                    id,
                    "T_fail",
                    "T_fail set on a successful episode",
                ))
            }
            (true, Some(f)) if f >= t => {
                return Err(Error::validation(
                    id,
                    "T_fail",
                    format!("T_fail {f} outside [0, {t})"),
                ))
            }
            _ => {}
        }
        let mut chunk_rows = None;
        for step in &self.steps {
            if step.t >= t.max(1) {
                return Err(Error::validation(
                    id,
                    "steps",
                    format!("step t={} outside horizon {}", step.t, t),
                ));
            }
            if step.candidates.is_empty() {
                return Err(Error::validation(
                    id,
                    "steps",
                    format!("step t={} has no candidates", step.t),
                ));
            }
            if step.executed_index >= step.candidates.len() {
                return Err(Error::validation(
                    id,
                    "executed_index",
                    format!(
                        "step t={}: executed_index {} >= {} candidates",
                        step.t,
                        step.executed_index,
                        step.candidates.len()
                    ),
                ));
            }
            for c in &step.candidates {
                let rows = c.actions.len();
                if *chunk_rows.get_or_insert(rows) != rows {
                    return Err(Error::validation(
                        id,
                        "candidates",
                        format!("step t={}: inconsistent chunk length {rows}", step.t),
                    ));
                }
                if c.actions.iter().flatten().any(|a| !a.is_finite()) {
                    return Err(Error::validation(
                        id,
                        "candidates",
                        format!("step t={}: non-finite action", step.t),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Checks every recorded chunk has exactly `k` rows.
    pub fn validate_chunk_len(&self, k: usize) -> Result<()> {
        for step in &self.steps {
            for c in &step.candidates {
                if c.actions.len() != k {
                    return Err(Error::validation(
                        self.episode_id.as_str(),
                        "candidates",
                        format!("chunk has {} rows, expected K={k}", c.actions.len()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A labeled candidate chunk with its per-modality backbone features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkSample {
    pub sample_id: String,
    pub task_id: String,
    pub features: PerModality<FeatureBlock>,
    pub present: PerModality<bool>,
    pub y_binary: u8,
    pub y_cont: f64,
    pub raw_advantage: f64,
}

impl ChunkSample {
    /// A labeled sample with no features attached (all modalities absent).
    pub fn stub(
        sample_id: impl Into<String>,
        task_id: impl Into<String>,
        y_binary: u8,
        y_cont: f64,
        raw_advantage: f64,
    ) -> Self {
        ChunkSample {
            sample_id: sample_id.into(),
            task_id: task_id.into(),
            features: PerModality::default(),
            present: PerModality::default(),
            y_binary,
            y_cont,
            raw_advantage,
        }
    }

    pub fn validate(&self, tau_a: f64) -> Result<()> {
        let id = self.sample_id.as_str();
        if self.y_binary > 1 {
            return Err(Error::validation(id, "y_binary", "must be 0 or 1"));
        }
        if !self.y_cont.is_finite() || !self.raw_advantage.is_finite() {
            return Err(Error::validation(id, "y_cont", "non-finite label"));
        }
        if (self.y_binary == 1) != (self.y_cont >= tau_a) {
            return Err(Error::validation(
                id,
                "y_binary",
                format!(
                    "label inconsistency: y_binary={} but y_cont={} vs tau_A={}",
                    self.y_binary, self.y_cont, tau_a
                ),
            ));
        }
        let mut width = None;
        for m in Modality::ALL {
            let block = &self.features[m];
            if self.present[m] {
                if block.is_empty() {
                    return Err(Error::validation(
                        id,
                        "features",
                        format!("present modality `{}` has no tokens", m.name()),
                    ));
                }
            } else if !block.is_empty() {
                return Err(Error::validation(
                    id,
                    "features",
                    format!("absent modality `{}` carries tokens", m.name()),
                ));
            }
            for row in block {
                if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
                    return Err(Error::validation(
                        id,
                        "features",
                        format!("ragged token rows in `{}`", m.name()),
                    ));
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::validation(
                        id,
                        "features",
                        format!("non-finite feature in `{}`", m.name()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Feature dimension `d`, if any modality is present.
    pub fn feature_dim(&self) -> Option<usize> {
        Modality::ALL
            .into_iter()
            .find_map(|m| self.features[m].first().map(Vec::len))
    }
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per non-blank line, returning `(line_number, value)`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn parse_traces(path: &Path) -> Result<Vec<EpisodeTrace>> {
    read_jsonl::<EpisodeTrace>(path)?
        .into_iter()
        .map(|(_, ep)| ep.validate().map(|_| ep))
        .collect()
}

pub fn write_traces(traces: &[EpisodeTrace], path: &Path) -> Result<()> {
    write_jsonl(traces, path)
}

pub fn write_samples(samples: &[ChunkSample], path: &Path) -> Result<()> {
    write_jsonl(samples, path)
}

/// Parses a sample file, checking label consistency against `tau_a`.
pub fn parse_samples(path: &Path, tau_a: f64) -> Result<Vec<ChunkSample>> {
    read_jsonl::<ChunkSample>(path)?
        .into_iter()
        .map(|(_, s)| s.validate(tau_a).map(|_| s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn episode(t: usize) -> EpisodeTrace {
        EpisodeTrace {
            episode_id: "ep-0".into(),
            task_id: "reach".into(),
            horizon: t,
            rewards: vec![-0.01; t],
            collision: vec![false; t],
            critic_values: vec![0.5; t + 1],
            failed: false,
            fail_step: None,
            steps: vec![StepRecord {
                t: 0,
                candidates: vec![ActionChunk {
                    actions: vec![vec![0.1, 0.0]; 5],
                    noise_seed: 3,
                }],
                executed_index: 0,
            }],
        }
    }

    fn write_lines(dir: &tempfile::TempDir, name: &str, lines: &[String]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn single_episode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let ep = episode(3);
        write_traces(std::slice::from_ref(&ep), &p).unwrap();
        let back = parse_traces(&p).unwrap();
        assert_eq!(back, vec![ep]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"T\":3") && text.contains("\"T_fail\":null"));
    }

    #[test]
    fn short_critic_values_rejected() {
        let mut ep = episode(3);
        ep.critic_values.pop();
        let err = ep.validate().unwrap_err().to_string();
        assert!(err.contains("critic_values length"), "{err}");
        assert!(err.contains("ep-0"));
    }

    #[test]
    fn each_trace_invariant_rejected() {
        let mut cases: Vec<(&str, EpisodeTrace)> = Vec::new();
        let mut e = episode(3);
        e.rewards.push(0.0);
        cases.push(("rewards", e));
        let mut e = episode(3);
        e.collision.pop();
        cases.push(("collision", e));
        let mut e = episode(3);
        e.failed = true;
        cases.push(("T_fail", e));
        let mut e = episode(3);
        e.fail_step = Some(1);
        cases.push(("T_fail", e));
        let mut e = episode(3);
        e.failed = true;
        e.fail_step = Some(3);
        cases.push(("T_fail", e));
        let mut e = episode(3);
        e.steps[0].executed_index = 1;
        cases.push(("executed_index", e));
        let mut e = episode(3);
        e.steps[0].candidates.clear();
        cases.push(("steps", e));
        let mut e = episode(3);
        e.steps[0].candidates[0].actions[0][0] = f64::NAN;
        cases.push(("candidates", e));
        let mut e = episode(3);
        e.rewards[1] = f64::INFINITY;
        cases.push(("rewards", e));
        for (field, ep) in cases {
            match ep.validate() {
                Err(Error::Validation { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected validation error on {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_string(&episode(3)).unwrap();
        let p = write_lines(&dir, "t.jsonl", &[good, "{not json".into()]);
        match parse_traces(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failed_and_successful_counts_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let eps: Vec<_> = (0..120)
            .map(|i| {
                let mut e = episode(10);
                e.episode_id = format!("ep-{i}");
                if i % 2 == 0 {
                    e.failed = true;
                    e.fail_step = Some(7);
                }
                e
            })
            .collect();
        write_traces(&eps, &p).unwrap();
        let back = parse_traces(&p).unwrap();
        assert_eq!(back.len(), 120);
        assert_eq!(back.iter().filter(|e| e.failed).count(), 60);
        assert_eq!(back[5].episode_id, "ep-5");
    }

    fn sample(y_binary: u8, y_cont: f64) -> ChunkSample {
        let mut s = ChunkSample::stub("s-0", "reach", y_binary, y_cont, -0.3);
        s.features.text = vec![vec![1.0, 2.0]; 2];
        s.present.text = true;
        s.features.image = vec![vec![0.5, 0.5]];
        s.present.image = true;
        s.features.action = vec![vec![0.0, -1.0]; 3];
        s.present.action = true;
        s
    }

    #[test]
    fn empty_sample_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_samples(&[], &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(parse_samples(&p, -0.21).unwrap().is_empty());
    }

    #[test]
    fn absent_state_written_as_empty_block() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let s = sample(1, 0.4);
        write_samples(std::slice::from_ref(&s), &p).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["present"]["state"], serde_json::json!(false));
        assert_eq!(v["features"]["state"], serde_json::json!([]));
        assert_eq!(parse_samples(&p, -0.21).unwrap(), vec![s]);
    }

    #[test]
    fn label_threshold_checked_at_load() {
        assert!(sample(1, -0.5).validate(-0.21).is_err());
        assert!(sample(0, 0.5).validate(-0.21).is_err());
        // boundary is inclusive
        sample(1, -0.21).validate(-0.21).unwrap();
        assert!(sample(0, -0.21).validate(-0.21).is_err());
    }

    #[test]
    fn sample_feature_invariants() {
        let mut s = sample(1, 0.0);
        s.present.state = true;
        assert!(s.validate(-0.21).is_err(), "present but empty");
        let mut s = sample(1, 0.0);
        s.features.state = vec![vec![0.0, 0.0]];
        assert!(s.validate(-0.21).is_err(), "absent but populated");
        let mut s = sample(1, 0.0);
        s.features.image[0].push(1.0);
        assert!(s.validate(-0.21).is_err(), "ragged");
        let mut s = sample(1, 0.0);
        s.y_binary = 2;
        assert!(s.validate(-0.21).is_err());
    }
}
