//! Dual-branch verifier head.
//!
//! Two independent two-layer feed-forward branches read the pooled global
//! feature: the classification branch produces a logit whose sigmoid is the
//! safety confidence `p`, and the regression branch predicts the normalized
//! chunk advantage. Hidden activations are rectified linear units; inverted
//! dropout is applied to them in training mode only.
//!
//! Checkpoints are JSON documents:
//!
//! ```text
//! { "format": "argus-gate.verifier", "version": 1,
//!   "input_dim": 128, "hidden": 64, "dropout": 0.1, "init_seed": 7,
//!   "lineage": { "<key>": "<value>", ... },
//!   "cls": { "w1": [hidden*input, row-major by hidden unit], "b1": [hidden],
//!            "w2": [hidden], "b2": <scalar> },
//!   "reg": { same layout } }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "argus-gate.verifier";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierDims {
    pub input: usize,
    pub hidden: usize,
}

impl VerifierDims {
    /// `4d` inputs for feature dimension `d`, default hidden width 64.
    pub fn for_feature_dim(d: usize) -> Self {
        VerifierDims {
            input: 4 * d,
            hidden: 64,
        }
    }
}

/// One affine-ReLU-affine branch. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Branch {
    pub fn zeros(dims: VerifierDims) -> Self {
        Branch {
            w1: vec![0.0; dims.hidden * dims.input],
            b1: vec![0.0; dims.hidden],
            w2: vec![0.0; dims.hidden],
            b2: 0.0,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(std::iter::once(&mut self.b2))
    }

    /// True for weight entries, false for biases, aligned with [`Branch::values`].
    pub fn weight_flags(&self) -> impl Iterator<Item = bool> {
        std::iter::repeat_n(true, self.w1.len())
            .chain(std::iter::repeat_n(false, self.b1.len()))
            .chain(std::iter::repeat_n(true, self.w2.len()))
            .chain(std::iter::once(false))
    }

    fn check(&self, dims: VerifierDims, name: &str) -> Result<()> {
        if self.w1.len() != dims.hidden * dims.input
            || self.b1.len() != dims.hidden
            || self.w2.len() != dims.hidden
        {
            return Err(Error::Shape(format!(
                "{name} branch does not match dims {dims:?}"
            )));
        }
        if self.values().any(|x| !x.is_finite()) {
            return Err(Error::validation(name, "weights", "non-finite weight"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierParams {
    pub dims: VerifierDims,
    pub dropout: f64,
    pub init_seed: u64,
    pub cls: Branch,
    pub reg: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifierOutput {
    pub p: f64,
    pub a_hat: f64,
    pub logit: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(dims: VerifierDims, seed: u64) -> Result<VerifierParams> {
    if dims.input == 0 || dims.hidden == 0 {
        return Err(Error::Config(format!("invalid verifier dims {dims:?}")));
    }
    let init_branch = |key: &str| {
        let mut r = rng::stream(seed, key);
        let mut b = Branch::zeros(dims);
        let lim1 = (6.0 / (dims.input + dims.hidden) as f64).sqrt();
        b.w1.iter_mut()
            .for_each(|w| *w = r.random_range(-lim1..=lim1));
        let lim2 = (6.0 / (dims.hidden + 1) as f64).sqrt();
        b.w2.iter_mut()
            .for_each(|w| *w = r.random_range(-lim2..=lim2));
        b
    };
    Ok(VerifierParams {
        dims,
        dropout: DEFAULT_DROPOUT,
        init_seed: seed,
        cls: init_branch("init/cls"),
        reg: init_branch("init/reg"),
    })
}

/// Per-branch intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub pre: Vec<f64>,
    /// Dropout multiplier per hidden unit: 0 or `1/(1-rate)` in training, 1 otherwise.
    pub keep_scale: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub cls: BranchTrace,
    pub reg: BranchTrace,
    pub output: VerifierOutput,
}

fn branch_forward(
    b: &Branch,
    dims: VerifierDims,
    z: &[f64],
    dropout: Option<(f64, &mut rng::StreamRng)>,
) -> BranchTrace {
    let mut pre = b.b1.clone();
    for (j, p) in pre.iter_mut().enumerate() {
        let row = &b.w1[j * dims.input..(j + 1) * dims.input];
        *p += row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
    }
    let keep_scale: Vec<f64> = match dropout {
        Some((rate, r)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            (0..dims.hidden)
                .map(|_| {
                    if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        _ => vec![1.0; dims.hidden],
    };
    let hidden: Vec<f64> = pre
        .iter()
        .zip(&keep_scale)
        .map(|(p, k)| p.max(0.0) * k)
        .collect();
    let out = b.b2 + hidden.iter().zip(&b.w2).map(|(h, w)| h * w).sum::<f64>();
    BranchTrace {
        pre,
        keep_scale,
        hidden,
        out,
    }
}

impl VerifierParams {
    pub fn validate(&self) -> Result<()> {
        self.cls.check(self.dims, "cls")?;
        self.reg.check(self.dims, "reg")?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 * (self.dims.hidden * self.dims.input + 2 * self.dims.hidden + 1)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.cls.values().chain(self.reg.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.cls.values_mut().chain(self.reg.values_mut())
    }

    pub fn weight_flags(&self) -> impl Iterator<Item = bool> + '_ {
        self.cls.weight_flags().chain(self.reg.weight_flags())
    }

    /// Forward pass keeping intermediates. Dropout is drawn from a stream
    /// keyed by `dropout_seed` when `train_mode` is set.
    pub fn forward_trace(
        &self,
        z: &[f64],
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<ForwardTrace> {
        if z.len() != self.dims.input {
            return Err(Error::Shape(format!(
                "input has {} features, verifier expects {}",
                z.len(),
                self.dims.input
            )));
        }
        let (cls, reg) = if train_mode {
            let mut rc = rng::stream_ints(dropout_seed, &[0]);
            let mut rr = rng::stream_ints(dropout_seed, &[1]);
            (
                branch_forward(&self.cls, self.dims, z, Some((self.dropout, &mut rc))),
                branch_forward(&self.reg, self.dims, z, Some((self.dropout, &mut rr))),
            )
        } else {
            (
                branch_forward(&self.cls, self.dims, z, None),
                branch_forward(&self.reg, self.dims, z, None),
            )
        };
        let output = VerifierOutput {
            p: sigmoid(cls.out),
            a_hat: reg.out,
            logit: cls.out,
        };
        Ok(ForwardTrace { cls, reg, output })
    }

    pub fn forward(
        &self,
        z: &[f64],
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<VerifierOutput> {
        Ok(self.forward_trace(z, train_mode, dropout_seed)?.output)
    }

    /// Eval-mode forward.
    pub fn predict(&self, z: &[f64]) -> Result<VerifierOutput> {
        self.forward(z, false, 0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    input_dim: usize,
    hidden: usize,
    dropout: f64,
    init_seed: u64,
    lineage: BTreeMap<String, String>,
    cls: Branch,
    reg: Branch,
}

pub fn save_checkpoint(
    params: &VerifierParams,
    lineage: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        input_dim: params.dims.input,
        hidden: params.dims.hidden,
        dropout: params.dropout,
        init_seed: params.init_seed,
        lineage: lineage.clone(),
        cls: params.cls.clone(),
        reg: params.reg.clone(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(VerifierParams, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        source,
    })?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::validation(
            path.display().to_string(),
            "format",
            format!("unsupported checkpoint {} v{}", file.format, file.version),
        ));
    }
    let params = VerifierParams {
        dims: VerifierDims {
            input: file.input_dim,
            hidden: file.hidden,
        },
        dropout: file.dropout,
        init_seed: file.init_seed,
        cls: file.cls,
        reg: file.reg,
    };
    params.validate()?;
    Ok((params, file.lineage))
}
