//! Statistics and experiment protocols.

pub mod ablation;
pub mod auroc;
pub mod baselines;
pub mod bootstrap;
pub mod contribution;
pub mod permutation;
pub mod report;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use auroc::{auroc, masked_auroc};
pub use bootstrap::{bootstrap_ci, bootstrap_ci_masked, BootstrapCi};

use crate::data::{Cohort, Fold, PresenceMask};
use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig, ModelParams, Predictions, SubjectBatch};
use crate::train::{train, TrainConfig, TrainOutcome};

/// Test AUROC per task. Task 2 is `None` when its labeled subset holds a
/// single class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAurocs {
    pub t1: f64,
    pub t2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn from_cohort(cohort: &Cohort) -> Splits {
        Splits {
            train: cohort.fold_indices(Fold::Train),
            val: cohort.fold_indices(Fold::Val),
            test: cohort.fold_indices(Fold::Test),
        }
    }
}

/// Trains on the cohort's train fold with early stopping on its val fold.
pub fn fit(cohort: &Cohort, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    let s = Splits::from_cohort(cohort);
    train(cohort, &s.train, &s.val, model_cfg, train_cfg)
}

pub(crate) fn optional_auroc(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedAuroc(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Inference on `idx`, optionally with overridden presence masks.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    cohort: &Cohort,
    idx: &[usize],
    masks: Option<Vec<PresenceMask>>,
) -> Result<(TaskAurocs, Predictions)> {
    let batch = match masks {
        Some(m) => SubjectBatch::with_masks(cohort, idx, m),
        None => SubjectBatch::from_cohort(cohort, idx),
    };
    let pred = predict(params, config, &batch)?;
    let t1 = auroc(&pred.scores_t1(), &batch.y1)?;
    let t2 = optional_auroc(masked_auroc(&pred.scores_t2(), &batch.y2))?;
    Ok((TaskAurocs { t1, t2 }, pred))
}
