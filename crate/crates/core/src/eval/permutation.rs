//! Joint label-permutation test with full retraining.
//!
//! Replicate `i` shuffles labels with a `ChaCha8Rng` seeded from
//! `split_seed(base_seed, i)`: first `y1` over every subject, then the `y2`
//! values among labeled subjects only, so the missingness pattern is kept.
//! A replicate that fails is retried once with `split_seed(base_seed, i + n)`
//! for both the shuffle and the training seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, fit, TaskAurocs};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// SplitMix64 finalizer over `base + (i + 1) * golden gamma`. Gives each
/// replicate an independent seed that does not depend on scheduling.
pub fn split_seed(base: u64, i: u64) -> u64 {
    let mut z = base.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(1 + #{null >= observed}) / (N + 1)`.
pub fn permutation_p_value(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    (1 + exceed) as f64 / (null.len() + 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermutationConfig {
    pub n: usize,
    pub base_seed: u64,
    pub workers: usize,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            n: 1000,
            base_seed: 2024,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub mean: f64,
    pub sd: f64,
}

impl NullSummary {
    pub fn of(values: &[f64]) -> NullSummary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        NullSummary { mean, sd: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub n: usize,
    pub base_seed: u64,
    pub observed_t1: f64,
    pub observed_t2: f64,
    pub p_t1: f64,
    pub p_t2: f64,
    pub null_t1: Vec<f64>,
    pub null_t2: Vec<f64>,
    pub null_summary_t1: NullSummary,
    pub null_summary_t2: NullSummary,
    /// Replicates that needed their retry seed.
    pub retried: Vec<usize>,
}

/// Shuffled label vectors for one replicate.
pub fn permuted_labels(cohort: &Cohort, seed: u64) -> (Vec<u8>, Vec<i8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y1: Vec<u8> = cohort.subjects.iter().map(|s| s.y1).collect();
    y1.shuffle(&mut rng);
    let mut y2: Vec<i8> = cohort.subjects.iter().map(|s| s.y2).collect();
    let labeled: Vec<usize> = (0..y2.len()).filter(|&i| cohort.subjects[i].has_y2()).collect();
    let mut vals: Vec<i8> = labeled.iter().map(|&i| y2[i]).collect();
    vals.shuffle(&mut rng);
    for (&i, v) in labeled.iter().zip(vals) {
        y2[i] = v;
    }
    (y1, y2)
}

fn replicate(
    cohort: &Cohort,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    shuffle_seed: u64,
    train_seed: u64,
) -> Result<(f64, f64)> {
    let (y1, y2) = permuted_labels(cohort, shuffle_seed);
    let shuffled = cohort.with_labels(&y1, &y2);
    let cfg = TrainConfig {
        seed: train_seed,
        ..train_cfg.clone()
    };
    let out = fit(&shuffled, model_cfg, &cfg)?;
    let test = shuffled.fold_indices(crate::data::Fold::Test);
    let (a, _) = evaluate(&out.params, model_cfg, &shuffled, &test, None)?;
    let t2 = a
        .t2
        .ok_or_else(|| Error::UndefinedAuroc("permuted Task-2 test labels have one class".into()))?;
    Ok((a.t1, t2))
}

/// Runs `cfg.n` retraining replicates on a pool of `cfg.workers` threads.
/// Results are collected by replicate index, so they do not depend on the
/// worker count.
pub fn permutation_test(
    cohort: &Cohort,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    observed: TaskAurocs,
    cfg: &PermutationConfig,
) -> Result<PermutationResult> {
    if cfg.n == 0 || cfg.workers == 0 {
        return Err(Error::config("permutation count and workers must be positive"));
    }
    let observed_t2 = observed
        .t2
        .ok_or_else(|| Error::UndefinedAuroc("observed Task-2 AUROC is undefined".into()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let n = cfg.n as u64;
    let runs: Vec<Result<((f64, f64), bool)>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let first = split_seed(cfg.base_seed, i);
                match replicate(cohort, model_cfg, train_cfg, first, train_cfg.seed) {
                    Ok(v) => Ok((v, false)),
                    Err(e) => {
                        log::warn!("permutation {i} failed ({e}); retrying with a fresh seed");
                        let retry = split_seed(cfg.base_seed, i + n);
                        replicate(cohort, model_cfg, train_cfg, retry, retry)
                            .map(|v| (v, true))
                            .map_err(|e2| Error::numeric(format!("permutation {i} failed twice: {e2}")))
                    }
                }
            })
            .collect()
    });
    let mut null_t1 = Vec::with_capacity(cfg.n);
    let mut null_t2 = Vec::with_capacity(cfg.n);
    let mut retried = Vec::new();
    for (i, r) in runs.into_iter().enumerate() {
        let ((a1, a2), was_retried) = r?;
        null_t1.push(a1);
        null_t2.push(a2);
        if was_retried {
            retried.push(i);
        }
    }
    Ok(PermutationResult {
        n: cfg.n,
        base_seed: cfg.base_seed,
        observed_t1: observed.t1,
        observed_t2,
        p_t1: permutation_p_value(observed.t1, &null_t1),
        p_t2: permutation_p_value(observed_t2, &null_t2),
        null_summary_t1: NullSummary::of(&null_t1),
        null_summary_t2: NullSummary::of(&null_t2),
        null_t1,
        null_t2,
        retried,
    })
}
