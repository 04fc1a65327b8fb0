//! Inference-time masking analyses: leave-one-out, keep-one-out and the
//! missingness degradation sweep. None of them touch the parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, TaskAurocs};
use crate::data::{Cohort, Modality, PresenceMask, N_MODALITIES};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const DEFAULT_RHOS: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0];
pub const DEFAULT_MASK_SEED: u64 = 13;

/// Subjects in `idx` with all four modalities measured.
pub fn complete_case(cohort: &Cohort, idx: &[usize]) -> Vec<usize> {
    idx.iter()
        .copied()
        .filter(|&i| cohort.subjects[i].present == [true; N_MODALITIES])
        .collect()
}

fn sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRow {
    pub modality: Modality,
    pub auroc_t1: f64,
    pub auroc_t2: Option<f64>,
    /// `reference - masked` (LOO only).
    pub delta_t1: Option<f64>,
    pub delta_t2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub n_subjects: usize,
    /// All-modality AUROCs on the complete-case subset.
    pub reference: TaskAurocs,
    pub loo: Vec<ModalityRow>,
    pub koo: Vec<ModalityRow>,
}

impl ContributionReport {
    /// Modality with the largest LOO delta for a task (1 or 2).
    pub fn loo_argmax(&self, task: u8) -> Option<Modality> {
        argmax(&self.loo, |r| if task == 1 { r.delta_t1 } else { r.delta_t2 })
    }

    /// Modality with the highest KOO AUROC for a task (1 or 2).
    pub fn koo_argmax(&self, task: u8) -> Option<Modality> {
        argmax(&self.koo, |r| if task == 1 { Some(r.auroc_t1) } else { r.auroc_t2 })
    }
}

fn argmax(rows: &[ModalityRow], key: impl Fn(&ModalityRow) -> Option<f64>) -> Option<Modality> {
    rows.iter()
        .filter_map(|r| key(r).map(|v| (r.modality, v)))
        .fold(None, |best: Option<(Modality, f64)>, (m, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((m, v)),
        })
        .map(|(m, _)| m)
}

/// LOO and KOO on the complete-case subset of `test_idx`.
pub fn contribution_analysis(
    params: &ModelParams,
    config: &ModelConfig,
    cohort: &Cohort,
    test_idx: &[usize],
) -> Result<ContributionReport> {
    let cc = complete_case(cohort, test_idx);
    if cc.is_empty() {
        return Err(Error::UndefinedAuroc("no complete-case test subjects".into()));
    }
    let (reference, _) = evaluate(params, config, cohort, &cc, None)?;
    let mut loo = Vec::new();
    let mut koo = Vec::new();
    for m in Modality::ALL {
        let k = m.index();
        let drop: PresenceMask = std::array::from_fn(|j| j != k);
        let (a, _) = evaluate(params, config, cohort, &cc, Some(vec![drop; cc.len()]))?;
        loo.push(ModalityRow {
            modality: m,
            auroc_t1: a.t1,
            auroc_t2: a.t2,
            delta_t1: Some(reference.t1 - a.t1),
            delta_t2: sub(reference.t2, a.t2),
        });
        let keep: PresenceMask = std::array::from_fn(|j| j == k);
        let (a, _) = evaluate(params, config, cohort, &cc, Some(vec![keep; cc.len()]))?;
        koo.push(ModalityRow {
            modality: m,
            auroc_t1: a.t1,
            auroc_t2: a.t2,
            delta_t1: None,
            delta_t2: None,
        });
    }
    Ok(ContributionReport {
        n_subjects: cc.len(),
        reference,
        loo,
        koo,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationPoint {
    pub modality: Modality,
    pub rho: f64,
    pub n_masked: usize,
    pub auroc_t1: f64,
    pub auroc_t2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub mask_seed: u64,
    pub rhos: Vec<f64>,
    pub baseline: TaskAurocs,
    /// All four modalities masked for every subject.
    pub meta_only: TaskAurocs,
    pub curves: Vec<DegradationPoint>,
}

/// Subjects masked for every (modality, rho) cell. One `ChaCha8Rng` seeded
/// with `mask_seed`; for each modality in order and each rho in list order,
/// the test positions are fully shuffled and the first `floor(rho * n)` are
/// masked.
pub fn degradation_subsets(n: usize, rhos: &[f64], mask_seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    (0..N_MODALITIES)
        .map(|_| {
            rhos.iter()
                .map(|&rho| {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    perm.truncate((rho * n as f64).floor() as usize);
                    perm
                })
                .collect()
        })
        .collect()
}

pub fn degradation_sweep(
    params: &ModelParams,
    config: &ModelConfig,
    cohort: &Cohort,
    test_idx: &[usize],
    rhos: &[f64],
    mask_seed: u64,
) -> Result<DegradationReport> {
    if test_idx.is_empty() {
        return Err(Error::config("empty test set"));
    }
    if rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::config("rho values must lie in [0, 1]"));
    }
    let n = test_idx.len();
    let base_masks: Vec<PresenceMask> = test_idx.iter().map(|&i| cohort.subjects[i].present).collect();
    let (baseline, _) = evaluate(params, config, cohort, test_idx, None)?;
    let (meta_only, _) = evaluate(params, config, cohort, test_idx, Some(vec![[false; N_MODALITIES]; n]))?;
    let subsets = degradation_subsets(n, rhos, mask_seed);
    let mut curves = Vec::new();
    for (m, per_rho) in subsets.iter().enumerate() {
        for (&rho, subset) in rhos.iter().zip(per_rho) {
            let mut masks = base_masks.clone();
            for &k in subset {
                masks[k][m] = false;
            }
            let (a, _) = evaluate(params, config, cohort, test_idx, Some(masks))?;
            curves.push(DegradationPoint {
                modality: Modality::from_index(m),
                rho,
                n_masked: subset.len(),
                auroc_t1: a.t1,
                auroc_t2: a.t2,
            });
        }
    }
    Ok(DegradationReport {
        mask_seed,
        rhos: rhos.to_vec(),
        baseline,
        meta_only,
        curves,
    })
}
