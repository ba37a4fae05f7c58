//! Epoch batch construction with a fixed invalid-sample share.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Splits an epoch into index batches.
///
/// With `negative_fraction > 0` every batch holds `round(f · batch_size)`
/// negatives (`y_binary = 0`) and the rest positives. Positives are drawn
/// without replacement; a final incomplete positive group is dropped unless
/// there are too few positives for even one batch, in which case a single
/// batch uses all of them. Negatives are drawn without replacement when the
/// pool covers the epoch's demand and with replacement otherwise.
///
/// With `negative_fraction = 0`, or when either class is missing, the epoch
/// is a plain shuffle cut into consecutive batches (the last may be short).
pub fn balanced_batches(
    labels: &[u8],
    batch_size: usize,
    negative_fraction: f64,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be > 0".into()));
    }
    if !(0.0..1.0).contains(&negative_fraction) {
        return Err(Error::Config(format!(
            "negative_fraction {negative_fraction} not in [0,1)"
        )));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let n_neg = (negative_fraction * batch_size as f64).round() as usize;
    if negative_fraction == 0.0 || pos.is_empty() || neg.is_empty() || n_neg == 0 {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(rng);
        return Ok(all.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }
    let n_pos = batch_size - n_neg;
    pos.shuffle(rng);
    let groups: Vec<Vec<usize>> = if pos.len() < n_pos || n_pos == 0 {
        vec![pos]
    } else {
        pos.chunks_exact(n_pos).map(<[usize]>::to_vec).collect()
    };
    let demand = groups.len() * n_neg;
    let negs: Vec<usize> = if neg.len() >= demand {
        neg.shuffle(rng);
        neg.truncate(demand);
        neg
    } else {
        (0..demand)
            .map(|_| neg[rng.random_range(0..neg.len())])
            .collect()
    };
    let mut batches: Vec<Vec<usize>> = groups
        .into_iter()
        .zip(negs.chunks_exact(n_neg))
        .map(|(mut b, ns)| {
            b.extend_from_slice(ns);
            b
        })
        .collect();
    for b in &mut batches {
        b.shuffle(rng);
    }
    Ok(batches)
}
