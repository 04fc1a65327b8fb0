//! Percentile bootstrap confidence intervals for AUROC on fixed predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::auroc::auroc;
use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples that contained both classes.
    pub kept: usize,
    pub resamples: usize,
    /// Set when the point estimate falls outside `[lo, hi]`.
    pub point_outside: bool,
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile CI from `resamples` draws of `n` subject indices with
/// replacement. Draw sequence: a `ChaCha8Rng` seeded with `seed`, and for
/// each resample `n` calls of `gen_range(0..n)`. Single-class resamples are
/// discarded.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], resamples: usize, seed: u64) -> Result<BootstrapCi> {
    let point = auroc(scores, labels)?;
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut s = vec![0.0; n];
    let mut y = vec![0u8; n];
    for _ in 0..resamples {
        for k in 0..n {
            let i = rng.gen_range(0..n);
            s[k] = scores[i];
            y[k] = labels[i];
        }
        match auroc(&s, &y) {
            Ok(a) => values.push(a),
            Err(Error::UndefinedAuroc(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedAuroc("every bootstrap resample had one class".into()));
    }
    values.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&values, 0.025);
    let hi = quantile_sorted(&values, 0.975);
    Ok(BootstrapCi {
        point,
        lo,
        hi,
        kept: values.len(),
        resamples,
        point_outside: point < lo || point > hi,
    })
}

/// [`bootstrap_ci`] over rows whose label is not `-1`.
pub fn bootstrap_ci_masked(scores: &[f64], labels: &[i8], resamples: usize, seed: u64) -> Result<BootstrapCi> {
    let (s, y): (Vec<f64>, Vec<u8>) = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y >= 0)
        .map(|(&s, &y)| (s, y as u8))
        .unzip();
    bootstrap_ci(&s, &y, resamples, seed)
}
