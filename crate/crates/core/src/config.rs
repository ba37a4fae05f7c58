//! Flat `key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Later
//! assignments win, and command-line overrides are applied last. Every key
//! has a default, so an empty file is a valid configuration. Component seeds
//! are derived from the single root `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SynthFeatureConfig;
use crate::labeler::LabelerConfig;
use crate::rng;
use crate::scheduler::{Arm, GateMode};
use crate::simenv::{ClosedLoopConfig, TaskSpec, ToyEnvConfig, ToyPolicyConfig, TraceGenConfig};
use crate::training::{ClsLoss, LossConfig, TrainConfig};

/// Which scorer drives the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Verifier,
    Oracle,
    AcceptAll,
    RejectAll,
}

impl ScorerKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "verifier" => Some(ScorerKind::Verifier),
            "oracle" => Some(ScorerKind::Oracle),
            "accept_all" => Some(ScorerKind::AcceptAll),
            "reject_all" => Some(ScorerKind::RejectAll),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ScorerKind::Verifier => "verifier",
            ScorerKind::Oracle => "oracle",
            ScorerKind::AcceptAll => "accept_all",
            ScorerKind::RejectAll => "reject_all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Paths {
    pub traces: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub env: ToyEnvConfig,
    pub policy: ToyPolicyConfig,
    pub gen: TraceGenConfig,
    pub labeler: LabelerConfig,
    pub features: SynthFeatureConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub holdout_fraction: f64,
    pub closed_loop: ClosedLoopConfig,
    pub scorer: ScorerKind,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            env: ToyEnvConfig::default(),
            policy: ToyPolicyConfig::default(),
            gen: TraceGenConfig::default(),
            labeler: LabelerConfig::default(),
            features: SynthFeatureConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            holdout_fraction: 0.1,
            closed_loop: ClosedLoopConfig::default(),
            scorer: ScorerKind::Verifier,
            paths: Paths::default(),
        };
        c.closed_loop.scheduler.record_timing = false;
        c.derive_seeds();
        c
    }
}

/// Parses `key = value` lines into a map.
pub fn parse_kv(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("{origin}:{}: empty key", i + 1)));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{v}`"
        ))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Re-derives component seeds from the root seed.
    fn derive_seeds(&mut self) {
        self.env.seed = rng::derive_seed(self.seed, "env");
        self.policy.seed = rng::derive_seed(self.seed, "policy");
        self.features.seed = rng::derive_seed(self.seed, "features");
        self.train.seed = rng::derive_seed(self.seed, "train");
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("root".to_string(), self.seed),
            ("env".to_string(), self.env.seed),
            ("policy".to_string(), self.policy.seed),
            ("features".to_string(), self.features.seed),
            ("train".to_string(), self.train.seed),
        ])
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(s) = map.get("seed") {
            c.seed = num("seed", s)?;
        }
        c.derive_seeds();
        for (k, v) in map {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<(Self, BTreeMap<String, String>)> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_kv(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        let cfg = Self::from_map(&map)?;
        Ok((cfg, map))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let sched = &mut self.closed_loop.scheduler;
        match key {
            "seed" => {}
            "k" => {
                let k: usize = num(key, v)?;
                self.policy.k = k;
                self.labeler.k = k;
            }
            "env.tasks" => {
                self.env.tasks = v
                    .split(',')
                    .map(|n| {
                        TaskSpec::preset(n.trim()).ok_or_else(|| {
                            Error::Config(format!("unknown task preset `{}`", n.trim()))
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "env.extent" => self.env.extent = num(key, v)?,
            "env.max_speed" => self.env.max_speed = num(key, v)?,
            "env.max_steps" => self.env.max_steps = num(key, v)?,
            "env.noise_sigma" => self.env.noise_sigma = num(key, v)?,
            "env.start_jitter" => self.env.start_jitter = num(key, v)?,
            "env.step_cost" => self.env.step_cost = num(key, v)?,
            "env.goal_reward" => self.env.goal_reward = num(key, v)?,
            "env.collision_reward" => self.env.collision_reward = num(key, v)?,
            "env.fail_reward" => self.env.fail_reward = num(key, v)?,
            "env.destabilize_delay" => self.env.destabilize_delay = num(key, v)?,
            "policy.quality" => self.policy.quality = num(key, v)?,
            "policy.bad_mix" => {
                let w: Vec<f64> = list(key, v)?;
                self.policy.bad_mix = w
                    .try_into()
                    .map_err(|_| Error::Config("`policy.bad_mix` needs three weights".into()))?;
            }
            "policy.heading_jitter" => self.policy.heading_jitter = num(key, v)?,
            "policy.avoid_margin" => self.policy.avoid_margin = num(key, v)?,
            "gen.episodes" => self.gen.episodes = num(key, v)?,
            "gen.candidates_per_step" => self.gen.candidates_per_step = num(key, v)?,
            "gen.outcome_quota" => {
                self.gen.outcome_quota = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "label.gamma" => {
                self.labeler.gamma = num(key, v)?;
                self.env.gamma = self.labeler.gamma;
            }
            "label.backtrack_window" => self.labeler.backtrack_window = num(key, v)?,
            "label.decay" => self.labeler.decay = num(key, v)?,
            "label.fail_weight" => self.labeler.fail_weight = num(key, v)?,
            "label.eps" => self.labeler.eps = num(key, v)?,
            "label.tau_a" => {
                self.labeler.tau_a = num(key, v)?;
                self.loss.tau_a = self.labeler.tau_a;
            }
            "features.dim" => self.features.dim = num(key, v)?,
            "features.tokens" => {
                let t: Vec<usize> = list(key, v)?;
                let [a, b, c, d]: [usize; 4] = t
                    .try_into()
                    .map_err(|_| Error::Config("`features.tokens` needs four counts".into()))?;
                self.features.tokens.text = a;
                self.features.tokens.image = b;
                self.features.tokens.state = c;
                self.features.tokens.action = d;
            }
            "features.signal_strength" => self.features.signal_strength = num(key, v)?,
            "features.noise_sigma" => self.features.noise_sigma = num(key, v)?,
            "features.covert_fraction" => self.features.covert_fraction = num(key, v)?,
            "features.covert_scale" => self.features.covert_scale = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.negative_fraction" => self.train.negative_fraction = num(key, v)?,
            "train.hidden" => self.train.hidden = num(key, v)?,
            "train.dropout" => self.train.dropout = num(key, v)?,
            "train.holdout_fraction" => self.holdout_fraction = num(key, v)?,
            "train.cls_loss" => {
                self.loss.cls_loss = ClsLoss::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown cls_loss `{v}`")))?
            }
            "train.focal_alpha" => self.loss.focal_alpha = num(key, v)?,
            "train.focal_beta" => self.loss.focal_beta = num(key, v)?,
            "train.lambda_reg" => self.loss.lambda_reg = num(key, v)?,
            "train.lambda_soft" => self.loss.lambda_soft = num(key, v)?,
            "train.tau_temp" => self.loss.tau_temp = num(key, v)?,
            "sched.warmup_steps" => sched.warmup_steps = num(key, v)?,
            "sched.pass_threshold" => {
                sched.pass_threshold = num(key, v)?;
                self.train.pass_threshold = sched.pass_threshold;
            }
            "sched.max_attempts" => sched.max_attempts = num(key, v)?,
            "sched.mode" => {
                sched.mode = GateMode::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown mode `{v}`")))?
            }
            "sched.truncation" => sched.truncation = boolean(key, v)?,
            "sched.record_timing" => sched.record_timing = boolean(key, v)?,
            "sim.episodes" => self.closed_loop.episodes = num(key, v)?,
            "sim.arm" => {
                self.closed_loop.arm =
                    Arm::parse(v).ok_or_else(|| Error::Config(format!("unknown arm `{v}`")))?
            }
            "sim.monitor" => self.closed_loop.monitor = boolean(key, v)?,
            "sim.scorer" => {
                self.scorer = ScorerKind::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown scorer `{v}`")))?
            }
            "wm.drift_per_call" => self.closed_loop.wm.drift_per_call = num(key, v)?,
            "wm.drift_per_bad" => self.closed_loop.wm.drift_per_bad = num(key, v)?,
            "wm.render_cost" => self.closed_loop.wm.render_cost = num(key, v)?,
            "paths.traces" => self.paths.traces = opt_path(v),
            "paths.samples" => self.paths.samples = opt_path(v),
            "paths.checkpoint" => self.paths.checkpoint = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.labeler.validate()?;
        self.features.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.closed_loop.scheduler.validate()?;
        self.closed_loop.wm.validate()?;
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(
                "train.holdout_fraction must be in [0,1)".into(),
            ));
        }
        if self.gen.candidates_per_step == 0 {
            return Err(Error::Config("gen.candidates_per_step must be >= 1".into()));
        }
        Ok(())
    }

    /// Every effective setting as `key = value` pairs; parsing the result
    /// reproduces this configuration.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let s = &self.closed_loop.scheduler;
        let t = &self.features.tokens;
        let p = |o: &Option<PathBuf>| {
            o.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("k", self.policy.k.to_string()),
            (
                "env.tasks",
                self.env
                    .tasks
                    .iter()
                    .map(|t| t.id.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("env.extent", self.env.extent.to_string()),
            ("env.max_speed", self.env.max_speed.to_string()),
            ("env.max_steps", self.env.max_steps.to_string()),
            ("env.noise_sigma", self.env.noise_sigma.to_string()),
            ("env.start_jitter", self.env.start_jitter.to_string()),
            ("env.step_cost", self.env.step_cost.to_string()),
            ("env.goal_reward", self.env.goal_reward.to_string()),
            (
                "env.collision_reward",
                self.env.collision_reward.to_string(),
            ),
            ("env.fail_reward", self.env.fail_reward.to_string()),
            (
                "env.destabilize_delay",
                self.env.destabilize_delay.to_string(),
            ),
            ("policy.quality", self.policy.quality.to_string()),
            ("policy.bad_mix", fmt_list(&self.policy.bad_mix)),
            (
                "policy.heading_jitter",
                self.policy.heading_jitter.to_string(),
            ),
            ("policy.avoid_margin", self.policy.avoid_margin.to_string()),
            ("gen.episodes", self.gen.episodes.to_string()),
            (
                "gen.candidates_per_step",
                self.gen.candidates_per_step.to_string(),
            ),
            (
                "gen.outcome_quota",
                self.gen
                    .outcome_quota
                    .map_or("none".into(), |q| q.to_string()),
            ),
            ("label.gamma", self.labeler.gamma.to_string()),
            (
                "label.backtrack_window",
                self.labeler.backtrack_window.to_string(),
            ),
            ("label.decay", self.labeler.decay.to_string()),
            ("label.fail_weight", self.labeler.fail_weight.to_string()),
            ("label.eps", self.labeler.eps.to_string()),
            ("label.tau_a", self.labeler.tau_a.to_string()),
            ("features.dim", self.features.dim.to_string()),
            (
                "features.tokens",
                format!("{},{},{},{}", t.text, t.image, t.state, t.action),
            ),
            (
                "features.signal_strength",
                self.features.signal_strength.to_string(),
            ),
            (
                "features.noise_sigma",
                self.features.noise_sigma.to_string(),
            ),
            (
                "features.covert_fraction",
                self.features.covert_fraction.to_string(),
            ),
            (
                "features.covert_scale",
                self.features.covert_scale.to_string(),
            ),
            ("train.lr", self.train.lr.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            (
                "train.negative_fraction",
                self.train.negative_fraction.to_string(),
            ),
            ("train.hidden", self.train.hidden.to_string()),
            ("train.dropout", self.train.dropout.to_string()),
            ("train.holdout_fraction", self.holdout_fraction.to_string()),
            ("train.cls_loss", self.loss.cls_loss.name().to_string()),
            ("train.focal_alpha", self.loss.focal_alpha.to_string()),
            ("train.focal_beta", self.loss.focal_beta.to_string()),
            ("train.lambda_reg", self.loss.lambda_reg.to_string()),
            ("train.lambda_soft", self.loss.lambda_soft.to_string()),
            ("train.tau_temp", self.loss.tau_temp.to_string()),
            ("sched.warmup_steps", s.warmup_steps.to_string()),
            ("sched.pass_threshold", s.pass_threshold.to_string()),
            ("sched.max_attempts", s.max_attempts.to_string()),
            ("sched.mode", s.mode.name().to_string()),
            ("sched.truncation", s.truncation.to_string()),
            ("sched.record_timing", s.record_timing.to_string()),
            ("sim.episodes", self.closed_loop.episodes.to_string()),
            ("sim.arm", self.closed_loop.arm.name().to_string()),
            ("sim.monitor", self.closed_loop.monitor.to_string()),
            ("sim.scorer", self.scorer.name().to_string()),
            (
                "wm.drift_per_call",
                self.closed_loop.wm.drift_per_call.to_string(),
            ),
            (
                "wm.drift_per_bad",
                self.closed_loop.wm.drift_per_bad.to_string(),
            ),
            (
                "wm.render_cost",
                self.closed_loop.wm.render_cost.to_string(),
            ),
            ("paths.traces", p(&self.paths.traces)),
            ("paths.samples", p(&self.paths.samples)),
            ("paths.checkpoint", p(&self.paths.checkpoint)),
        ];
        entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_map()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.labeler.k, 5);
        assert_eq!(c.labeler.gamma, 0.99);
        assert_eq!(c.labeler.backtrack_window, 20);
        assert_eq!(c.labeler.decay, 3.0);
        assert_eq!(c.labeler.tau_a, -0.21);
        assert_eq!(c.loss.focal_alpha, 0.25);
        assert_eq!(c.loss.focal_beta, 2.0);
        assert_eq!(c.loss.lambda_reg, 0.05);
        assert_eq!(c.loss.lambda_soft, 0.2);
        assert_eq!(c.loss.tau_temp, 0.25);
        assert_eq!(c.closed_loop.scheduler.warmup_steps, 20);
        assert_eq!(c.closed_loop.scheduler.pass_threshold, 0.275);
        assert_eq!(c.closed_loop.scheduler.max_attempts, 5);
        assert_eq!(
            (c.train.lr, c.train.weight_decay, c.train.epochs),
            (3e-4, 0.01, 10)
        );
        assert_eq!(c.train.dropout, 0.1);
    }

    #[test]
    fn parse_comments_and_overrides() {
        let text = "# run\nseed = 7\nk=4 # chunk\n\ntrain.epochs = 3\ntrain.epochs = 4\n";
        let mut map = parse_kv(text, "t").unwrap();
        let (k, v) = parse_override("sched.mode=imagination").unwrap();
        map.insert(k, v);
        let c = RunConfig::from_map(&map).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!((c.policy.k, c.labeler.k), (4, 4));
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.closed_loop.scheduler.mode, GateMode::Imagination);
        assert_ne!(c.env.seed, RunConfig::default().env.seed);
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "nope = 1",
            "train.epochs = x",
            "sim.arm = fancy",
            "justtext",
            "policy.quality = 2",
        ] {
            let res = parse_kv(bad, "t").and_then(|m| RunConfig::from_map(&m));
            assert!(matches!(res, Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut map = BTreeMap::new();
        map.insert("seed".to_string(), "11".to_string());
        map.insert("policy.bad_mix".to_string(), "0.2,0.3,0.5".to_string());
        map.insert("env.tasks".to_string(), "corridor".to_string());
        map.insert("paths.traces".to_string(), "a/b.jsonl".to_string());
        let c = RunConfig::from_map(&map).unwrap();
        let again = RunConfig::from_map(&c.to_map()).unwrap();
        assert_eq!(c, again);
        let text = c.to_text();
        assert_eq!(
            RunConfig::from_map(&parse_kv(&text, "s").unwrap()).unwrap(),
            c
        );
    }
}
