//! Verifier input representation.
//!
//! Each modality's token block is reduced by masked mean pooling and the four
//! summaries are concatenated in the order text, image, state, action. Missing
//! modalities contribute a zero block.
//!
//! The frozen multimodal backbone is replaced by [`synth_blocks`], a seeded
//! generator whose token means shift with the sample's label. Its separation
//! is controlled by `signal_strength` (along a fixed unit direction per
//! modality) and by an optional covert failure mode: a fraction of invalid
//! samples keep the valid-side shift on the primary direction and instead
//! deviate by a random sign along a second, orthogonal direction. The covert
//! mode is invisible to any linear read-out and only a nonlinear head can
//! recover it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::trace_model::{ChunkSample, FeatureBlock, Modality, PerModality};

/// Pooling stabilizer.
pub const POOL_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeature {
    pub blocks: PerModality<Vec<f64>>,
    /// Concatenation of `blocks` in modality order; length `4d`.
    pub global: Vec<f64>,
}

/// `(Σ_j mask_j · H_j) / (Σ_j mask_j + ε)`, component-wise.
pub fn masked_mean_pool(h: &[Vec<f64>], mask: &[f64], eps: f64) -> Result<Vec<f64>> {
    if h.len() != mask.len() {
        return Err(Error::Shape(format!(
            "mask length {} != token count {}",
            mask.len(),
            h.len()
        )));
    }
    let d = h.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; d];
    let mut weight = 0.0;
    for (row, &m) in h.iter().zip(mask) {
        if row.len() != d {
            return Err(Error::Shape(format!(
                "ragged token row: {} != {d}",
                row.len()
            )));
        }
        weight += m;
        if m != 0.0 {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += m * x;
            }
        }
    }
    let denom = weight + eps;
    acc.iter_mut().for_each(|a| *a /= denom);
    Ok(acc)
}

/// Pools every present modality with an all-ones mask over its block.
pub fn assemble_global(
    blocks: &PerModality<FeatureBlock>,
    present: &PerModality<bool>,
    dim: usize,
    eps: f64,
) -> Result<PooledFeature> {
    let mut pooled = PerModality::<Vec<f64>>::default();
    for m in Modality::ALL {
        pooled[m] = if present[m] {
            let block = &blocks[m];
            if block.is_empty() {
                return Err(Error::Shape(format!(
                    "present modality `{}` has an empty block",
                    m.name()
                )));
            }
            let z = masked_mean_pool(block, &vec![1.0; block.len()], eps)?;
            if z.len() != dim {
                return Err(Error::Shape(format!(
                    "modality `{}` has width {} but d = {dim}",
                    m.name(),
                    z.len()
                )));
            }
            z
        } else {
            vec![0.0; dim]
        };
    }
    let global = Modality::ALL
        .iter()
        .flat_map(|&m| pooled[m].iter().copied())
        .collect();
    Ok(PooledFeature {
        blocks: pooled,
        global,
    })
}

pub fn pool_sample(sample: &ChunkSample, dim: usize, eps: f64) -> Result<PooledFeature> {
    assemble_global(&sample.features, &sample.present, dim, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFeatureConfig {
    pub dim: usize,
    /// Tokens per modality; zero marks the modality absent.
    pub tokens: PerModality<usize>,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    /// Fraction of invalid samples drawn from the covert mode.
    pub covert_fraction: f64,
    /// Covert deviation along the secondary direction, in units of
    /// `signal_strength`.
    pub covert_scale: f64,
    pub seed: u64,
}

impl Default for SynthFeatureConfig {
    fn default() -> Self {
        SynthFeatureConfig {
            dim: 32,
            tokens: PerModality {
                text: 8,
                image: 16,
                state: 4,
                action: 10,
            },
            signal_strength: 0.5,
            noise_sigma: 1.0,
            covert_fraction: 0.0,
            covert_scale: 2.0,
            seed: 0,
        }
    }
}

impl SynthFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("feature dim must be >= 1".into()));
        }
        if !(self.signal_strength >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "signal_strength and noise_sigma must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.covert_fraction) {
            return Err(Error::Config("covert_fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn present(&self) -> PerModality<bool> {
        self.tokens.map(|_, &n| n > 0)
    }

    pub fn basis(&self) -> FeatureBasis {
        FeatureBasis::new(self)
    }
}

/// Fixed per-modality geometry derived from the generator seed.
#[derive(Debug, Clone)]
pub struct FeatureBasis {
    base: PerModality<Vec<f64>>,
    primary: PerModality<Vec<f64>>,
    secondary: PerModality<Vec<f64>>,
}

const BASE_SCALE: f64 = 0.5;

fn gaussian_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl FeatureBasis {
    pub fn new(cfg: &SynthFeatureConfig) -> Self {
        let d = cfg.dim;
        let base = PerModality::from_fn(|m| {
            let mut r = rng::stream(cfg.seed, &format!("base/{}", m.name()));
            gaussian_vec(&mut r, d)
                .into_iter()
                .map(|x| BASE_SCALE * x)
                .collect()
        });
        let primary = PerModality::from_fn(|m| {
            let mut r = rng::stream(cfg.seed, &format!("primary/{}", m.name()));
            unit(gaussian_vec(&mut r, d))
        });
        let secondary = PerModality::from_fn(|m| {
            let mut r = rng::stream(cfg.seed, &format!("secondary/{}", m.name()));
            let u = &primary[m];
            let mut v = gaussian_vec(&mut r, d);
            if d > 1 {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            unit(v)
        });
        FeatureBasis {
            base,
            primary,
            secondary,
        }
    }

    pub fn primary(&self, m: Modality) -> &[f64] {
        &self.primary[m]
    }

    pub fn secondary(&self, m: Modality) -> &[f64] {
        &self.secondary[m]
    }
}

/// Token blocks for one sample. Deterministic in `(cfg.seed, sample_id)`.
pub fn synth_blocks(
    sample_id: &str,
    y_binary: u8,
    cfg: &SynthFeatureConfig,
    basis: &FeatureBasis,
) -> PerModality<FeatureBlock> {
    let mut r = rng::stream(cfg.seed, &format!("sample/{sample_id}"));
    let covert = y_binary == 0 && r.random::<f64>() < cfg.covert_fraction;
    let covert_sign = if r.random::<bool>() { 1.0 } else { -1.0 };
    let primary_sign = if y_binary == 1 || covert { 1.0 } else { -1.0 };
    let s = cfg.signal_strength;
    PerModality::from_fn(|m| {
        let mean: Vec<f64> = (0..cfg.dim)
            .map(|j| {
                let mut x = basis.base[m][j] + primary_sign * s * basis.primary[m][j];
                if covert {
                    x += covert_sign * cfg.covert_scale * s * basis.secondary[m][j];
                }
                x
            })
            .collect();
        (0..cfg.tokens[m])
            .map(|_| {
                mean.iter()
                    .map(|mu| mu + cfg.noise_sigma * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    })
}

/// Attaches synthetic features to a labeled stub.
pub fn synth_features(stub: &ChunkSample, cfg: &SynthFeatureConfig) -> ChunkSample {
    synth_features_with(stub, cfg, &cfg.basis())
}

pub fn synth_features_with(
    stub: &ChunkSample,
    cfg: &SynthFeatureConfig,
    basis: &FeatureBasis,
) -> ChunkSample {
    ChunkSample {
        features: synth_blocks(&stub.sample_id, stub.y_binary, cfg, basis),
        present: cfg.present(),
        ..stub.clone()
    }
}
