//! Report containers and delimited-text emitters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::AblationRow;
use super::baselines::BaselineRow;
use super::bootstrap::{bootstrap_ci, bootstrap_ci_masked, BootstrapCi};
use super::contribution::{ContributionReport, DegradationReport};
use super::permutation::PermutationResult;
use super::{evaluate, TaskAurocs};
use crate::data::{Cohort, MISSING_LABEL};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{ModelConfig, ModelParams, Predictions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub n_test: usize,
    pub n_test_t2: usize,
    pub auroc: TaskAurocs,
    pub ci_t1: BootstrapCi,
    pub ci_t2: Option<BootstrapCi>,
    pub bootstrap_seed: u64,
}

/// Test AUROCs with percentile intervals, plus the raw predictions.
pub fn test_summary(
    params: &ModelParams,
    config: &ModelConfig,
    cohort: &Cohort,
    test_idx: &[usize],
    resamples: usize,
    bootstrap_seed: u64,
) -> Result<(TestSummary, Predictions)> {
    let (auroc, pred) = evaluate(params, config, cohort, test_idx, None)?;
    let y2 = cohort.y2(test_idx);
    let ci_t1 = bootstrap_ci(&pred.scores_t1(), &cohort.y1(test_idx), resamples, bootstrap_seed)?;
    let ci_t2 = match bootstrap_ci_masked(&pred.scores_t2(), &y2, resamples, bootstrap_seed) {
        Ok(ci) => Some(ci),
        Err(Error::UndefinedAuroc(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((
        TestSummary {
            n_test: test_idx.len(),
            n_test_t2: y2.iter().filter(|&&v| v != MISSING_LABEL).count(),
            auroc,
            ci_t1,
            ci_t2,
            bootstrap_seed,
        },
        pred,
    ))
}

/// Top-level JSON document written by the evaluation commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub test: Option<TestSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contribution: Option<ContributionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<Vec<BaselineRow>>,
}

impl EvalReport {
    pub fn new(config: serde_json::Value) -> EvalReport {
        EvalReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            test: None,
            permutation: None,
            contribution: None,
            degradation: None,
            ablation: None,
            baselines: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt_f64)
}

fn emit(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let wr = |w: &mut csv::Writer<std::fs::File>, r: &[String]| {
        w.write_record(r).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    };
    wr(&mut w, &header.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    for r in &rows {
        wr(&mut w, r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per subject: scores, labels and attention weights.
pub fn write_predictions(path: &Path, cohort: &Cohort, idx: &[usize], pred: &Predictions) -> Result<()> {
    let s1 = pred.scores_t1();
    let s2 = pred.scores_t2();
    let rows = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let s = &cohort.subjects[i];
            let mut r = vec![
                s.id.clone(),
                s.y1.to_string(),
                s.y2.to_string(),
                fmt_f64(s1[k]),
                fmt_f64(s2[k]),
            ];
            r.extend(pred.attention.row(k).iter().map(|&a| fmt_f64(a)));
            r
        })
        .collect();
    emit(
        path,
        &["subject_id", "y1", "y2", "score_t1", "score_t2", "attn_antibody", "attn_cell", "attn_cytokine", "attn_gene"],
        rows,
    )
}

pub fn write_contribution(path: &Path, r: &ContributionReport) -> Result<()> {
    let mut rows = Vec::new();
    for (kind, list) in [("loo", &r.loo), ("koo", &r.koo)] {
        for m in list {
            rows.push(vec![
                kind.to_string(),
                m.modality.to_string(),
                fmt_f64(m.auroc_t1),
                opt(m.auroc_t2),
                opt(m.delta_t1),
                opt(m.delta_t2),
            ]);
        }
    }
    emit(path, &["analysis", "modality", "auroc_t1", "auroc_t2", "delta_t1", "delta_t2"], rows)
}

pub fn write_degradation(path: &Path, r: &DegradationReport) -> Result<()> {
    let rows = r
        .curves
        .iter()
        .map(|p| {
            vec![
                p.modality.to_string(),
                fmt_f64(p.rho),
                p.n_masked.to_string(),
                fmt_f64(p.auroc_t1),
                opt(p.auroc_t2),
            ]
        })
        .collect();
    emit(path, &["modality", "rho", "n_masked", "auroc_t1", "auroc_t2"], rows)
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.cell.name().to_string(),
                fmt_f64(r.lambda),
                fmt_f64(r.modality_dropout_p),
                fmt_f64(r.w_t2),
                fmt_f64(r.auroc_t1),
                fmt_f64(r.ci_t1.lo),
                fmt_f64(r.ci_t1.hi),
                opt(r.auroc_t2),
                opt(r.ci_t2.as_ref().map(|c| c.lo)),
                opt(r.ci_t2.as_ref().map(|c| c.hi)),
                r.best_epoch.to_string(),
            ]
        })
        .collect();
    emit(
        path,
        &[
            "cell", "lambda", "modality_dropout_p", "w_t2", "auroc_t1", "ci_t1_lo", "ci_t1_hi", "auroc_t2", "ci_t2_lo",
            "ci_t2_hi", "best_epoch",
        ],
        rows,
    )
}

pub fn write_baselines(path: &Path, rows: &[BaselineRow]) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.method.name().to_string(),
                r.features.clone(),
                r.task.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                opt(r.auroc),
                opt(r.ci.as_ref().map(|c| c.lo)),
                opt(r.ci.as_ref().map(|c| c.hi)),
                r.degenerate.to_string(),
                r.converged.map_or(String::new(), |c| c.to_string()),
                r.n_imputed_test.to_string(),
            ]
        })
        .collect();
    emit(
        path,
        &[
            "method", "features", "task", "n_train", "n_test", "auroc", "ci_lo", "ci_hi", "degenerate", "converged",
            "n_imputed_test",
        ],
        rows,
    )
}

pub fn write_permutation_null(path: &Path, r: &PermutationResult) -> Result<()> {
    let rows = r
        .null_t1
        .iter()
        .zip(&r.null_t2)
        .enumerate()
        .map(|(i, (a, b))| vec![i.to_string(), fmt_f64(*a), fmt_f64(*b), r.retried.contains(&i).to_string()])
        .collect();
    emit(path, &["replicate", "auroc_t1", "auroc_t2", "retried"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::contribution::DegradationPoint;
    use crate::data::Modality;

    #[test]
    fn degradation_csv_shape() {
        let d = tempfile::tempdir().unwrap();
        let a = TaskAurocs { t1: 0.5, t2: None };
        let r = DegradationReport {
            mask_seed: 13,
            rhos: vec![0.0, 1.0],
            baseline: a,
            meta_only: a,
            curves: vec![DegradationPoint {
                modality: Modality::Gene,
                rho: 0.5,
                n_masked: 3,
                auroc_t1: 0.75,
                auroc_t2: None,
            }],
        };
        let p = d.path().join("deg.csv");
        write_degradation(&p, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "modality,rho,n_masked,auroc_t1,auroc_t2\ngene,0.5,3,0.75,\n");
    }

    #[test]
    fn report_json_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let r = EvalReport::new(serde_json::json!({"seed": 42}));
        let p = d.path().join("r.json");
        r.write_json(&p).unwrap();
        let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
