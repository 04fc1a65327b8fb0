//! The five-cell ablation grid: each cell switches off one component (or
//! both regularizers) and retrains with the same seed and split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_ci, bootstrap_ci_masked, BootstrapCi, DEFAULT_RESAMPLES};
use super::{evaluate, fit, Splits};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCell {
    Full,
    NoContrastive,
    NoModalityDropout,
    NeitherRegularizer,
    EqualTaskWeight,
}

impl AblationCell {
    pub const ALL: [AblationCell; 5] = [
        AblationCell::Full,
        AblationCell::NoContrastive,
        AblationCell::NoModalityDropout,
        AblationCell::NeitherRegularizer,
        AblationCell::EqualTaskWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationCell::Full => "full",
            AblationCell::NoContrastive => "no_contrastive",
            AblationCell::NoModalityDropout => "no_modality_dropout",
            AblationCell::NeitherRegularizer => "neither",
            AblationCell::EqualTaskWeight => "equal_task_weight",
        }
    }

    /// The cell's configuration derived from the full one.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            AblationCell::Full => {}
            AblationCell::NoContrastive => t.lambda = 0.0,
            AblationCell::NoModalityDropout => m.modality_dropout_p = 0.0,
            AblationCell::NeitherRegularizer => {
                t.lambda = 0.0;
                m.modality_dropout_p = 0.0;
            }
            AblationCell::EqualTaskWeight => t.w_t2 = 1.0,
        }
        (m, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub lambda: f64,
    pub modality_dropout_p: f64,
    pub w_t2: f64,
    pub auroc_t1: f64,
    pub auroc_t2: Option<f64>,
    pub ci_t1: BootstrapCi,
    pub ci_t2: Option<BootstrapCi>,
    pub best_epoch: usize,
}

pub fn ablation_runner(
    cohort: &Cohort,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    bootstrap_seed: u64,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let test = Splits::from_cohort(cohort).test;
    pool.install(|| {
        AblationCell::ALL
            .par_iter()
            .map(|&cell| {
                let (m, t) = cell.apply(model_cfg, train_cfg);
                let out = fit(cohort, &m, &t)?;
                let (a, pred) = evaluate(&out.params, &m, cohort, &test, None)?;
                let y1 = cohort.y1(&test);
                let y2 = cohort.y2(&test);
                let ci_t1 = bootstrap_ci(&pred.scores_t1(), &y1, DEFAULT_RESAMPLES, bootstrap_seed)?;
                let ci_t2 = match bootstrap_ci_masked(&pred.scores_t2(), &y2, DEFAULT_RESAMPLES, bootstrap_seed) {
                    Ok(ci) => Some(ci),
                    Err(Error::UndefinedAuroc(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(AblationRow {
                    cell,
                    lambda: t.lambda,
                    modality_dropout_p: m.modality_dropout_p,
                    w_t2: t.w_t2,
                    auroc_t1: a.t1,
                    auroc_t2: a.t2,
                    ci_t1,
                    ci_t2,
                    best_epoch: out.history.best_epoch,
                })
            })
            .collect()
    })
}
