//! Verifier training: joint loss, analytic gradients, class-balanced batches
//! and an Adam optimizer with decoupled weight decay.

mod batches;
pub mod loss;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use batches::balanced_batches;
pub use loss::{ClsLoss, LossBreakdown, LossConfig};

use crate::error::{Error, Result};
use crate::features::{pool_sample, POOL_EPS};
use crate::metrics::ClassificationReport;
use crate::rng;
use crate::trace_model::ChunkSample;
use crate::verifier::{init_params, Branch, BranchTrace, VerifierDims, VerifierParams};

/// Examples per parallel gradient shard. Shard results are summed in a fixed
/// order, so gradients do not depend on the thread count.
const SHARD: usize = 32;

/// A pooled global feature with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub z: Vec<f64>,
    pub y_binary: u8,
    pub y_cont: f64,
}

pub fn examples_from_samples(samples: &[ChunkSample], dim: usize) -> Result<Vec<TrainingExample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(TrainingExample {
                id: s.sample_id.clone(),
                z: pool_sample(s, dim, POOL_EPS)?.global,
                y_binary: s.y_binary,
                y_cont: s.y_cont,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negative_fraction: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    pub pass_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 512,
            negative_fraction: 0.3,
            hidden: 64,
            dropout: 0.1,
            seed: 0,
            pass_threshold: 0.275,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "epochs, batch_size and hidden must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.negative_fraction) {
            return Err(Error::Config("negative_fraction must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.pass_threshold) {
            return Err(Error::Config("pass_threshold must be in [0,1]".into()));
        }
        Ok(())
    }
}

fn branch_backward(g: f64, b: &Branch, tr: &BranchTrace, z: &[f64], scale: f64, out: &mut Branch) {
    let g = g * scale;
    if g == 0.0 {
        return;
    }
    let input = z.len();
    out.b2 += g;
    for j in 0..b.b1.len() {
        out.w2[j] += g * tr.hidden[j];
        if tr.pre[j] > 0.0 && tr.keep_scale[j] != 0.0 {
            let dh = g * b.w2[j] * tr.keep_scale[j];
            out.b1[j] += dh;
            let row = &mut out.w1[j * input..(j + 1) * input];
            for (w, x) in row.iter_mut().zip(z) {
                *w += dh * x;
            }
        }
    }
}

fn zero_like(params: &VerifierParams) -> VerifierParams {
    VerifierParams {
        dims: params.dims,
        dropout: params.dropout,
        init_seed: params.init_seed,
        cls: Branch::zeros(params.dims),
        reg: Branch::zeros(params.dims),
    }
}

/// Batch-mean joint loss and its gradient with respect to every parameter.
///
/// `weight_decay > 0` adds `½·wd·‖W‖²` over weight matrices (not biases) to
/// the returned total and the matching term to the gradient. With
/// `dropout_seed = Some(s)` the forward pass runs in training mode, example
/// `i` drawing its mask from a stream keyed by `(s, i)`.
pub fn backward(
    params: &VerifierParams,
    batch: &[&TrainingExample],
    cfg: &LossConfig,
    weight_decay: f64,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, VerifierParams)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let shards: Vec<Result<(LossBreakdown, VerifierParams)>> = batch
        .par_chunks(SHARD)
        .enumerate()
        .map(|(si, chunk)| {
            let mut grads = zero_like(params);
            let mut sum = LossBreakdown::default();
            for (k, ex) in chunk.iter().enumerate() {
                let i = (si * SHARD + k) as u64;
                let tr = match dropout_seed {
                    Some(s) => params.forward_trace(&ex.z, true, rng::derive_seed_ints(s, &[i]))?,
                    None => params.forward_trace(&ex.z, false, 0)?,
                };
                let e = loss::example_loss(
                    tr.output.logit,
                    tr.output.a_hat,
                    ex.y_binary,
                    ex.y_cont,
                    cfg,
                );
                sum.cls += e.cls;
                sum.soft += e.soft;
                sum.reg += e.reg;
                branch_backward(
                    e.d_logit,
                    &params.cls,
                    &tr.cls,
                    &ex.z,
                    scale,
                    &mut grads.cls,
                );
                branch_backward(
                    e.d_a_hat,
                    &params.reg,
                    &tr.reg,
                    &ex.z,
                    scale,
                    &mut grads.reg,
                );
            }
            Ok((sum, grads))
        })
        .collect();
    let mut total = LossBreakdown::default();
    let mut grads = zero_like(params);
    for shard in shards {
        let (s, g) = shard?;
        total.cls += s.cls;
        total.soft += s.soft;
        total.reg += s.reg;
        for (a, b) in grads.values_mut().zip(g.values()) {
            *a += b;
        }
    }
    let mut out = loss::finish(total, batch.len() as f64, cfg);
    if weight_decay > 0.0 {
        let mut sq = 0.0;
        for ((g, w), is_w) in grads
            .values_mut()
            .zip(params.values())
            .zip(params.weight_flags())
        {
            if is_w {
                *g += weight_decay * w;
                sq += w * w;
            }
        }
        out.total += 0.5 * weight_decay * sq;
    }
    Ok((out, grads))
}

/// Adam with decoupled weight decay applied to weight matrices only.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut VerifierParams, grads: &VerifierParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let flags: Vec<bool> = params.weight_flags().collect();
        for (k, (w, g)) in params.values_mut().zip(grads.values()).enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            let decay = if flags[k] {
                self.weight_decay * *w
            } else {
                0.0
            };
            *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_soft: f64,
    pub loss_reg: f64,
    pub holdout_f1: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub holdout_false_pass: Option<f64>,
    pub holdout_false_reject: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: VerifierParams,
    pub log: Vec<EpochLog>,
}

pub fn evaluate(
    params: &VerifierParams,
    examples: &[TrainingExample],
    pass_threshold: f64,
) -> Result<ClassificationReport> {
    let scores: Vec<f64> = examples
        .par_iter()
        .map(|e| params.predict(&e.z).map(|o| o.p))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = examples.iter().map(|e| e.y_binary).collect();
    ClassificationReport::from_scores(&scores, &labels, pass_threshold)
}

pub fn train(
    train_set: &[TrainingExample],
    holdout: &[TrainingExample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    loss_cfg.validate()?;
    cfg.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::EmptyBuffer("training set".into()))?;
    let dims = VerifierDims {
        input: first.z.len(),
        hidden: cfg.hidden,
    };
    if let Some(bad) = train_set
        .iter()
        .chain(holdout)
        .find(|e| e.z.len() != dims.input)
    {
        return Err(Error::Shape(format!(
            "example `{}` has {} features, expected {}",
            bad.id,
            bad.z.len(),
            dims.input
        )));
    }
    if let Some(bad) = train_set
        .iter()
        .chain(holdout)
        .find(|e| e.y_binary > 1 || !e.y_cont.is_finite() || e.z.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::validation(
            bad.id.clone(),
            "z",
            "non-finite feature or label",
        ));
    }
    let mut params = init_params(dims, rng::derive_seed(cfg.seed, "init"))?;
    params.dropout = cfg.dropout;
    let mut opt = Adam::new(params.num_params(), cfg.lr, cfg.weight_decay);
    let labels: Vec<u8> = train_set.iter().map(|e| e.y_binary).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream_ints(cfg.seed, &[1, epoch as u64]);
        let batches = balanced_batches(&labels, cfg.batch_size, cfg.negative_fraction, &mut r)?;
        let mut acc = LossBreakdown::default();
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &train_set[i]).collect();
            let seed = rng::derive_seed_ints(cfg.seed, &[2, epoch as u64, bi as u64]);
            let (l, g) = backward(&params, &batch, loss_cfg, 0.0, Some(seed))?;
            if !l.is_finite() || g.values().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: l.total,
                });
            }
            opt.step(&mut params, &g);
            acc.total += l.total;
            acc.cls += l.cls;
            acc.soft += l.soft;
            acc.reg += l.reg;
        }
        let nb = batches.len().max(1) as f64;
        let report = if holdout.is_empty() {
            None
        } else {
            Some(evaluate(&params, holdout, cfg.pass_threshold)?)
        };
        log.push(EpochLog {
            epoch,
            batches: batches.len(),
            loss: acc.total / nb,
            loss_cls: acc.cls / nb,
            loss_soft: acc.soft / nb,
            loss_reg: acc.reg / nb,
            holdout_f1: report.map(|r| r.f1),
            holdout_accuracy: report.map(|r| r.accuracy),
            holdout_false_pass: report.map(|r| r.false_pass_rate),
            holdout_false_reject: report.map(|r| r.false_reject_rate),
        });
    }
    Ok(TrainOutcome { params, log })
}

pub fn write_epoch_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
