//! Command implementations shared by the binary and the tests, plus run
//! manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScorerKind};
use crate::error::{Error, Result};
use crate::features::synth_features_with;
use crate::labeler::{label_dataset, write_label_report, write_stats_csv};
use crate::metrics::{trajectory_pass_rate, ClosedLoopReport, PassRateGap};
use crate::rng;
use crate::scheduler::DecisionRecord;
use crate::simenv::{
    generate_training_traces, run_closed_loop, write_tags_csv, CandidateScorer, ConstScorer,
    OracleScorer, VerifierScorer,
};
use crate::trace_model::{parse_samples, parse_traces, write_samples, write_traces};
use crate::training::{evaluate, examples_from_samples, train, write_epoch_log, TrainingExample};
use crate::verifier::{load_checkpoint, save_checkpoint};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUT_ENV: &str = "ARGUS_GATE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Gen,
    Label,
    Train,
    Eval,
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Label => "label",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub bytes: u64,
    /// FNV-1a 64 of the file contents, hex.
    pub fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRecord>,
    /// Output file names, relative to the run directory.
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    pub code_version: String,
    pub wall_clock_ms: u64,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn input_record(role: &str, path: &Path) -> Result<InputRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputRecord {
        role: role.into(),
        path: path.to_path_buf(),
        bytes: bytes.len() as u64,
        fnv1a: format!("{:016x}", fnv1a(&bytes)),
    })
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set for this command")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Output directory for a run: `$ARGUS_GATE_OUT/<name>`, default root `runs`.
pub fn run_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

/// Runs one command into `out`, then writes its manifest.
pub fn execute(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let res = match cmd {
        Command::Gen => gen(cfg, out)?,
        Command::Label => label(cfg, out)?,
        Command::Train => train_cmd(cfg, out)?,
        Command::Eval => eval(cfg, out)?,
        Command::Simulate => simulate(cfg, out)?,
    };
    let manifest = Manifest {
        command: cmd,
        config: cfg.to_map(),
        seeds: cfg.seeds(),
        inputs: res.inputs,
        outputs: res.outputs,
        warnings: res.warnings,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_ms: start.elapsed().as_millis() as u64,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Re-runs a manifest into `out`. Inputs must be unchanged.
pub fn replay(manifest: &Manifest, out: &Path) -> Result<Manifest> {
    for rec in &manifest.inputs {
        let now = input_record(&rec.role, &rec.path)?;
        if now.fnv1a != rec.fnv1a || now.bytes != rec.bytes {
            return Err(Error::validation(
                rec.path.display().to_string(),
                "inputs",
                format!("{} input changed since the manifest was written", rec.role),
            ));
        }
    }
    let cfg = RunConfig::from_map(&manifest.config)?;
    execute(manifest.command, &cfg, out)
}

fn gen(cfg: &RunConfig, out: &Path) -> Result<RunOutputs> {
    let mut res = RunOutputs::default();
    if cfg.gen.episodes == 0 && cfg.gen.outcome_quota.is_none() {
        res.warnings
            .push("gen.episodes = 0: writing an empty trace file".into());
    }
    let (traces, tags) = generate_training_traces(&cfg.env, &cfg.policy, &cfg.gen)?;
    write_traces(&traces, &out.join("traces.jsonl"))?;
    write_tags_csv(&tags, &out.join("tags.csv"))?;
    res.outputs = vec!["traces.jsonl".into(), "tags.csv".into()];
    Ok(res)
}

fn label(cfg: &RunConfig, out: &Path) -> Result<RunOutputs> {
    let path = require(&cfg.paths.traces, "paths.traces")?;
    let mut res = RunOutputs {
        inputs: vec![input_record("traces", path)?],
        ..RunOutputs::default()
    };
    let traces = parse_traces(path)?;
    if traces.is_empty() {
        res.warnings.push("no traces: writing empty outputs".into());
    }
    let ds = label_dataset(&traces, &cfg.labeler)?;
    let basis = cfg.features.basis();
    let samples: Vec<_> = ds
        .stubs()
        .iter()
        .map(|s| synth_features_with(s, &cfg.features, &basis))
        .collect();
    write_samples(&samples, &out.join("samples.jsonl"))?;
    write_stats_csv(&ds.stats, &out.join("stats.csv"))?;
    let mut report = Vec::new();
    write_label_report(&ds, &mut report).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("label_report.txt"), report).map_err(|e| Error::io(out, e))?;
    res.outputs = vec![
        "samples.jsonl".into(),
        "stats.csv".into(),
        "label_report.txt".into(),
    ];
    Ok(res)
}

/// Deterministic holdout membership keyed by sample id.
pub fn in_holdout(sample_id: &str, seed: u64, fraction: f64) -> bool {
    let h = rng::derive_seed(rng::derive_seed(seed, "holdout"), sample_id);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

fn load_examples(cfg: &RunConfig) -> Result<(PathBuf, Vec<TrainingExample>)> {
    let path = require(&cfg.paths.samples, "paths.samples")?;
    let samples = parse_samples(path, cfg.labeler.tau_a)?;
    let examples = examples_from_samples(&samples, cfg.features.dim)?;
    Ok((path.to_path_buf(), examples))
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<RunOutputs> {
    let (path, examples) = load_examples(cfg)?;
    let (holdout, train_set): (Vec<_>, Vec<_>) = examples
        .into_iter()
        .partition(|e| in_holdout(&e.id, cfg.train.seed, cfg.holdout_fraction));
    let outcome = train(&train_set, &holdout, &cfg.loss, &cfg.train)?;
    let mut lineage = BTreeMap::new();
    lineage.insert("samples".to_string(), path.display().to_string());
    lineage.insert("train_examples".to_string(), train_set.len().to_string());
    lineage.insert("holdout_examples".to_string(), holdout.len().to_string());
    lineage.insert("train_seed".to_string(), cfg.train.seed.to_string());
    lineage.insert("cls_loss".to_string(), cfg.loss.cls_loss.name().to_string());
    save_checkpoint(&outcome.params, &lineage, &out.join("checkpoint.json"))?;
    write_epoch_log(&outcome.log, &out.join("train_log.csv"))?;
    Ok(RunOutputs {
        inputs: vec![input_record("samples", &path)?],
        outputs: vec!["checkpoint.json".into(), "train_log.csv".into()],
        warnings: Vec::new(),
    })
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<RunOutputs> {
    let ckpt = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let (params, _) = load_checkpoint(ckpt)?;
    let (path, examples) = load_examples(cfg)?;
    let report = evaluate(&params, &examples, cfg.closed_loop.scheduler.pass_threshold)?;
    write_json(&out.join("eval.json"), &report)?;
    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    w.serialize(report)?;
    w.flush().map_err(|e| Error::io(out, e))?;
    write_text(&out.join("eval.txt"), &report.to_text())?;
    Ok(RunOutputs {
        inputs: vec![
            input_record("checkpoint", ckpt)?,
            input_record("samples", &path)?,
        ],
        outputs: vec!["eval.json".into(), "eval.csv".into(), "eval.txt".into()],
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct DecisionLine<'a> {
    episode: usize,
    task_id: &'a str,
    #[serde(flatten)]
    record: &'a DecisionRecord,
}

#[derive(Debug, Clone, Serialize)]
struct SimReport<'a> {
    #[serde(flatten)]
    report: &'a ClosedLoopReport,
    pass_rate: Option<PassRateGap>,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow<'a> {
    suite: &'a str,
    success_rate: f64,
    avg_steps: f64,
    avg_attempts: f64,
    avg_decision_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EpisodeRow<'a> {
    episode: usize,
    task_id: &'a str,
    success: bool,
    failed: bool,
    steps: usize,
    decisions: usize,
    candidates_drawn: usize,
    verifier_calls: usize,
    imagination_calls: usize,
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<RunOutputs> {
    let mut inputs = Vec::new();
    let loaded;
    let verifier;
    let scorer: &dyn CandidateScorer = match cfg.scorer {
        ScorerKind::Verifier => {
            let ckpt = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            inputs.push(input_record("checkpoint", ckpt)?);
            loaded = load_checkpoint(ckpt)?.0;
            verifier = VerifierScorer::new(&loaded, cfg.features.clone())?;
            &verifier
        }
        ScorerKind::Oracle => &OracleScorer,
        ScorerKind::AcceptAll => &ConstScorer(1.0),
        ScorerKind::RejectAll => &ConstScorer(0.0),
    };
    let run = run_closed_loop(&cfg.env, &cfg.policy, &cfg.closed_loop, scorer)?;

    let path = out.join("decisions.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ep in &run.episodes {
        for rec in &ep.records {
            let line = DecisionLine {
                episode: ep.summary.episode,
                task_id: &ep.summary.task_id,
                record: rec,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut ew = csv::Writer::from_path(out.join("episodes.csv"))?;
    for ep in &run.episodes {
        let s = &ep.summary;
        ew.serialize(EpisodeRow {
            episode: s.episode,
            task_id: &s.task_id,
            success: s.success,
            failed: s.failed,
            steps: s.steps,
            decisions: s.decisions,
            candidates_drawn: s.candidates_drawn,
            verifier_calls: s.verifier_calls,
            imagination_calls: s.imagination_calls,
        })?;
    }
    ew.flush().map_err(|e| Error::io(out, e))?;

    let r = &run.report;
    let mut sw = csv::Writer::from_path(out.join("summary.csv"))?;
    sw.serialize(SummaryRow {
        suite: "all",
        success_rate: r.success_rate,
        avg_steps: r.avg_steps,
        avg_attempts: r.avg_attempts_per_step,
        avg_decision_ms: r.avg_decision_ms,
    })?;
    sw.flush().map_err(|e| Error::io(out, e))?;

    let pass_rate = cfg.closed_loop.monitor.then(|| {
        let eps: Vec<(bool, Vec<f64>)> = run
            .episodes
            .iter()
            .map(|e| (e.summary.success, e.summary.first_attempt_p.clone()))
            .collect();
        trajectory_pass_rate(&eps, cfg.closed_loop.scheduler.pass_threshold)
    });
    write_json(
        &out.join("report.json"),
        &SimReport {
            report: r,
            pass_rate,
        },
    )?;
    Ok(RunOutputs {
        inputs,
        outputs: vec![
            "decisions.jsonl".into(),
            "episodes.csv".into(),
            "summary.csv".into(),
            "report.json".into(),
        ],
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn holdout_is_deterministic_and_near_fraction() {
        let n = 20_000;
        let k = (0..n)
            .filter(|i| in_holdout(&format!("e:{i}"), 3, 0.1))
            .count();
        assert!((k as f64 / n as f64 - 0.1).abs() < 0.01, "{k}");
        assert_eq!(in_holdout("x", 3, 0.5), in_holdout("x", 3, 0.5));
        assert!(!in_holdout("x", 3, 0.0));
    }

    #[test]
    fn missing_input_path_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        for cmd in [
            Command::Label,
            Command::Train,
            Command::Eval,
            Command::Simulate,
        ] {
            let err = execute(cmd, &cfg, dir.path()).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{cmd:?}: {err}");
        }
    }
}
