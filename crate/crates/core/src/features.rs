//! Feature tables and binary labels built from raw per-timepoint assays,
//! plus the leakage guards that keep label timepoints out of the inputs.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Fold, Modality, Scale, MISSING_LABEL};
use crate::error::{Error, Result};

/// Antibody feature whose titers define both labels.
pub const LABEL_ANTIGEN: &str = "IgG-PT";

/// Antibody features removed from inputs at every timepoint.
pub const PT_FAMILY: [&str; 5] = ["IgG-PT", "IgG1-PT", "IgG2-PT", "IgG3-PT", "IgG4-PT"];

/// Antibody days that define labels and may never appear as inputs.
pub const LABEL_DAYS: [u32; 2] = [14, 120];

pub const DEFAULT_GENE_TOP_K: usize = 2000;

/// Log fold change from baseline. Linear-scale assays use
/// `log2((v_t + 1) / (v_0 + 1))`, log-scale assays use `v_t - v_0`.
pub fn compute_lfc(baseline: f64, value: f64, scale: Scale) -> Result<f64> {
    match scale {
        Scale::Linear => {
            if baseline < 0.0 || value < 0.0 {
                return Err(Error::data(format!(
                    "negative linear-scale value (baseline {baseline}, value {value})"
                )));
            }
            Ok(((value + 1.0) / (baseline + 1.0)).log2())
        }
        Scale::Log => Ok(value - baseline),
    }
}

fn linear_fc(from: f64, to: f64) -> f64 {
    ((to + 1.0) / (from + 1.0)).log2()
}

/// Peak fold change (day 14 over day 0) and its median-split label.
/// Ties with the cutoff go to class 0.
pub fn build_peak_label(igg_pt_d0: f64, igg_pt_d14: f64, cutoff: f64) -> (f64, u8) {
    let fc = linear_fc(igg_pt_d0, igg_pt_d14);
    (fc, u8::from(fc > cutoff))
}

/// Retention fold change (day 120 over day 30). Either measurement missing
/// gives label -1.
pub fn build_retention_label(
    igg_pt_d30: Option<f64>,
    igg_pt_d120: Option<f64>,
    cutoff: f64,
) -> (Option<f64>, i8) {
    match (igg_pt_d30, igg_pt_d120) {
        (Some(d30), Some(d120)) => {
            let fc = linear_fc(d30, d120);
            (Some(fc), i8::from(fc > cutoff))
        }
        _ => (None, MISSING_LABEL),
    }
}

/// Median with the mean-of-middle-pair convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// One day of one assay: named features, one row per measured subject.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawTimepoint {
    pub feature_names: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl RawTimepoint {
    pub fn value(&self, subject: &str, feature: &str) -> Option<f64> {
        let col = self.feature_names.iter().position(|f| f == feature)?;
        self.rows.get(subject).map(|r| r[col])
    }
}

/// All timepoints available for one modality. An absent subject row means
/// the specimen was not collected.
#[derive(Clone, Debug, PartialEq)]
pub struct RawModalityTable {
    pub modality: Modality,
    pub timepoints: BTreeMap<u32, RawTimepoint>,
}

impl RawModalityTable {
    pub fn new(modality: Modality) -> Self {
        RawModalityTable {
            modality,
            timepoints: BTreeMap::new(),
        }
    }

    pub fn scale(&self) -> Scale {
        self.modality.scale()
    }
}

/// Records which subjects a fitted transform used for its statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub transform: String,
    pub fitted_on: Vec<String>,
}

/// A per-modality model input table.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub modality: Modality,
    pub columns: Vec<String>,
    pub subjects: Vec<String>,
    /// Row-major, `subjects.len() x columns.len()`.
    pub rows: Vec<Vec<f64>>,
    pub provenance: Vec<FitProvenance>,
}

impl FeatureTable {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn select_columns(&self, keep: &[usize]) -> FeatureTable {
        FeatureTable {
            modality: self.modality,
            columns: keep.iter().map(|&c| self.columns[c].clone()).collect(),
            subjects: self.subjects.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| keep.iter().map(|&c| r[c]).collect())
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

pub fn column_name(feature: &str, day: u32) -> String {
    format!("{feature}_d{day}")
}

/// Splits `FEATURE_dN` into `(FEATURE, N)`.
pub fn parse_column_name(column: &str) -> Option<(&str, u32)> {
    let pos = column.rfind("_d")?;
    let day = column[pos + 2..].parse().ok()?;
    Some((&column[..pos], day))
}

pub fn is_pt_family(feature: &str) -> bool {
    PT_FAMILY.iter().any(|p| p.eq_ignore_ascii_case(feature))
}

/// Outcome of turning a raw table into model features.
#[derive(Clone, Debug)]
pub struct BuiltFeatures {
    pub table: FeatureTable,
    /// Subjects with a baseline row but missing some required timepoint.
    pub excluded: Vec<String>,
}

/// Baseline values plus fold changes at each non-baseline input day.
/// Subjects lacking any required day are excluded from this modality.
pub fn build_modality_features(raw: &RawModalityTable) -> Result<BuiltFeatures> {
    let days = raw.modality.input_days();
    let empty = RawTimepoint::default();
    let tps: Vec<&RawTimepoint> = days
        .iter()
        .map(|d| raw.timepoints.get(d).unwrap_or(&empty))
        .collect();
    let baseline = tps[0];

    // Features measured at every required day, in baseline order.
    let features: Vec<&String> = baseline
        .feature_names
        .iter()
        .filter(|f| tps[1..].iter().all(|tp| tp.feature_names.contains(f)))
        .collect();
    let col_idx: Vec<Vec<usize>> = tps
        .iter()
        .map(|tp| {
            features
                .iter()
                .map(|f| tp.feature_names.iter().position(|g| g == *f).unwrap_or(0))
                .collect()
        })
        .collect();

    let mut columns = Vec::with_capacity(features.len() * days.len());
    for &day in days {
        for f in &features {
            columns.push(column_name(f, day));
        }
    }

    let all_subjects: BTreeSet<&String> = tps.iter().flat_map(|tp| tp.rows.keys()).collect();
    let mut subjects = Vec::new();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for sid in all_subjects {
        let Some(rows_for_subject) = tps
            .iter()
            .map(|tp| tp.rows.get(sid))
            .collect::<Option<Vec<_>>>()
        else {
            excluded.push(sid.clone());
            continue;
        };
        let base_row = rows_for_subject[0];
        let mut out = Vec::with_capacity(columns.len());
        for &c in &col_idx[0] {
            out.push(base_row[c]);
        }
        for (t, row) in rows_for_subject.iter().enumerate().skip(1) {
            for (k, &c) in col_idx[t].iter().enumerate() {
                let b = base_row[col_idx[0][k]];
                out.push(compute_lfc(b, row[c], raw.scale()).map_err(|e| {
                    Error::data(format!(
                        "{} subject {sid}, feature {}: {e}",
                        raw.modality, features[k]
                    ))
                })?);
            }
        }
        subjects.push(sid.clone());
        rows.push(out);
    }
    Ok(BuiltFeatures {
        table: FeatureTable {
            modality: raw.modality,
            columns,
            subjects,
            rows,
            provenance: Vec::new(),
        },
        excluded,
    })
}

/// Removes IgG-PT and its four subclasses at every timepoint.
pub fn strip_pt_family(table: &FeatureTable) -> FeatureTable {
    let keep: Vec<usize> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let feature = parse_column_name(c).map_or(c.as_str(), |(f, _)| f);
            !is_pt_family(feature)
        })
        .map(|(i, _)| i)
        .collect();
    table.select_columns(&keep)
}

/// Variance ranking and standardization statistics fit on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSelection {
    /// All columns, highest train variance first (ties by column index).
    pub ranked: Vec<usize>,
    /// The top-k columns in their original order.
    pub selected: Vec<usize>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

/// Keeps the `k` highest-variance columns, with variance, mean and sd
/// computed on `train_ids` rows only, and standardizes every row with
/// those train statistics.
pub fn variance_filter_top_k(
    table: &FeatureTable,
    train_ids: &HashSet<String>,
    k: usize,
) -> Result<(VarianceSelection, FeatureTable)> {
    let d = table.n_cols();
    if k > d {
        return Err(Error::config(format!(
            "variance filter k = {k} exceeds {d} columns"
        )));
    }
    let train_rows: Vec<&Vec<f64>> = table
        .subjects
        .iter()
        .zip(&table.rows)
        .filter(|(s, _)| train_ids.contains(*s))
        .map(|(_, r)| r)
        .collect();
    if train_rows.is_empty() {
        return Err(Error::data(format!(
            "{}: no training rows to fit the variance filter",
            table.modality
        )));
    }
    let n = train_rows.len() as f64;
    let mut means = vec![0.0; d];
    for r in &train_rows {
        for (m, v) in means.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = vec![0.0; d];
    for r in &train_rows {
        for j in 0..d {
            vars[j] += (r[j] - means[j]).powi(2);
        }
    }
    vars.iter_mut().for_each(|v| *v /= n);

    let mut ranked: Vec<usize> = (0..d).collect();
    ranked.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]).then(a.cmp(&b)));
    let mut selected = ranked[..k].to_vec();
    selected.sort_unstable();

    let sel_means: Vec<f64> = selected.iter().map(|&c| means[c]).collect();
    let sel_sds: Vec<f64> = selected
        .iter()
        .map(|&c| {
            let sd = vars[c].sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let mut out = table.select_columns(&selected);
    for row in &mut out.rows {
        for ((v, m), s) in row.iter_mut().zip(&sel_means).zip(&sel_sds) {
            *v = (*v - m) / s;
        }
    }
    let mut fitted_on: Vec<String> = table
        .subjects
        .iter()
        .filter(|s| train_ids.contains(*s))
        .cloned()
        .collect();
    fitted_on.sort();
    out.provenance.push(FitProvenance {
        transform: format!("variance_top_{k}_zscore"),
        fitted_on,
    });
    Ok((
        VarianceSelection {
            ranked,
            selected,
            means: sel_means,
            sds: sel_sds,
        },
        out,
    ))
}

/// Per-subject labels and the cutoffs that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub subject_id: String,
    pub fc_peak: f64,
    pub y1: u8,
    pub fc_retention: Option<f64>,
    pub y2: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub rows: Vec<LabelRow>,
    pub peak_cutoff: f64,
    pub retention_cutoff: f64,
    /// Subjects with a retention label but no peak label.
    pub dropped_without_peak: Vec<String>,
}

impl LabelSet {
    pub fn y1(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.y1).collect()
    }
}

/// Builds both labels from the IgG-PT antibody titers. Cutoffs default to
/// the cohort medians (peak over all peak-labeled subjects, retention over
/// the modeled subjects that carry both).
pub fn build_labels(
    antibody: &RawModalityTable,
    cutoffs: Option<(f64, f64)>,
) -> Result<LabelSet> {
    let titer = |day: u32, sid: &str| -> Option<f64> {
        antibody.timepoints.get(&day)?.value(sid, LABEL_ANTIGEN)
    };
    let subjects: BTreeSet<&String> = antibody
        .timepoints
        .values()
        .flat_map(|tp| tp.rows.keys())
        .collect();

    let mut peak = Vec::new();
    let mut dropped = Vec::new();
    for sid in &subjects {
        let d30 = titer(30, sid);
        let d120 = titer(120, sid);
        match (titer(0, sid), titer(14, sid)) {
            (Some(d0), Some(d14)) => {
                if d0 < 0.0 || d14 < 0.0 {
                    return Err(Error::data(format!("subject {sid}: negative IgG-PT titer")));
                }
                peak.push(((*sid).clone(), d0, d14, d30, d120));
            }
            _ => {
                if d30.is_some() && d120.is_some() {
                    dropped.push((*sid).clone());
                }
            }
        }
    }
    if peak.is_empty() {
        return Err(Error::data("no subject has IgG-PT at day 0 and day 14"));
    }

    let (peak_cut, ret_cut) = match cutoffs {
        Some(c) => c,
        None => {
            let fcs: Vec<f64> = peak.iter().map(|p| linear_fc(p.1, p.2)).collect();
            let rets: Vec<f64> = peak
                .iter()
                .filter_map(|p| Some(linear_fc(p.3?, p.4?)))
                .collect();
            (median(&fcs).unwrap_or(0.0), median(&rets).unwrap_or(0.0))
        }
    };

    let rows = peak
        .into_iter()
        .map(|(sid, d0, d14, d30, d120)| {
            let (fc_peak, y1) = build_peak_label(d0, d14, peak_cut);
            let (fc_retention, y2) = build_retention_label(d30, d120, ret_cut);
            LabelRow {
                subject_id: sid,
                fc_peak,
                y1,
                fc_retention,
                y2,
            }
        })
        .collect();
    Ok(LabelSet {
        rows,
        peak_cutoff: peak_cut,
        retention_cutoff: ret_cut,
        dropped_without_peak: dropped,
    })
}

/// Fold sizes for `n` subjects: val and test rounded from their fractions,
/// train takes the remainder.
pub fn fold_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let val = (fractions[1] * n as f64).round() as usize;
    let test = (fractions[2] * n as f64).round() as usize;
    [n.saturating_sub(val + test), val, test]
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Split stratified on the Task-1 label. Each class is shuffled with the
/// seeded RNG and dealt into test, val, then train with per-class quotas
/// proportional to the class share.
pub fn stratified_split(y1: &[u8], fractions: [f64; 3], seed: u64) -> Result<Vec<Fold>> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::config(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let n = y1.len();
    let sizes = fold_sizes(n, fractions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| y1[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| y1[i] != 1).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let share = pos.len() as f64 / n.max(1) as f64;

    let mut folds = vec![Fold::Train; n];
    let mut cursor_pos = 0;
    let mut cursor_neg = 0;
    for (fold, size) in [(Fold::Test, sizes[2]), (Fold::Val, sizes[1])] {
        let n_pos = ((size as f64 * share).round() as usize).min(pos.len() - cursor_pos);
        let n_neg = size - n_pos;
        if n_neg > neg.len() - cursor_neg {
            return Err(Error::Stratification(format!(
                "not enough negatives for the {} fold",
                fold.name()
            )));
        }
        for &i in &pos[cursor_pos..cursor_pos + n_pos] {
            folds[i] = fold;
        }
        for &i in &neg[cursor_neg..cursor_neg + n_neg] {
            folds[i] = fold;
        }
        cursor_pos += n_pos;
        cursor_neg += n_neg;
    }
    for fold in [Fold::Train, Fold::Val, Fold::Test] {
        let members: Vec<u8> = (0..n).filter(|&i| folds[i] == fold).map(|i| y1[i]).collect();
        if members.is_empty() {
            continue;
        }
        if members.iter().all(|&y| y == members[0]) {
            return Err(Error::Stratification(format!(
                "{} fold contains a single class",
                fold.name()
            )));
        }
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub modality: Modality,
    pub column: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub findings: Vec<AuditFinding>,
    pub tables_checked: usize,
}

/// Checks for label-day antibody columns, PT-family columns, and fitted
/// transforms whose statistics touched non-training subjects.
pub fn leakage_audit(tables: &[FeatureTable], train_ids: &HashSet<String>) -> AuditReport {
    let mut findings = Vec::new();
    for t in tables {
        for c in &t.columns {
            let (feature, day) = match parse_column_name(c) {
                Some((f, d)) => (f, Some(d)),
                None => (c.as_str(), None),
            };
            if is_pt_family(feature) {
                findings.push(AuditFinding {
                    modality: t.modality,
                    column: Some(c.clone()),
                    reason: "PT-family antibody feature used as input".into(),
                });
            }
            if t.modality == Modality::Antibody {
                if let Some(d) = day.filter(|d| LABEL_DAYS.contains(d)) {
                    findings.push(AuditFinding {
                        modality: t.modality,
                        column: Some(c.clone()),
                        reason: format!("antibody day-{d} column is a label timepoint"),
                    });
                }
            }
        }
        for p in &t.provenance {
            let leaked: Vec<&String> = p.fitted_on.iter().filter(|s| !train_ids.contains(*s)).collect();
            if !leaked.is_empty() {
                findings.push(AuditFinding {
                    modality: t.modality,
                    column: None,
                    reason: format!(
                        "{} fit on {} non-training subjects (e.g. {})",
                        p.transform,
                        leaked.len(),
                        leaked[0]
                    ),
                });
            }
        }
    }
    AuditReport {
        passed: findings.is_empty(),
        findings,
        tables_checked: tables.len(),
    }
}

/// Settings for turning raw per-timepoint tables into model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    pub gene_top_k: usize,
    pub split_seed: u64,
    pub fractions: [f64; 3],
    /// Fixed `(peak, retention)` cutoffs; cohort medians when absent.
    pub cutoffs: Option<(f64, f64)>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            gene_top_k: DEFAULT_GENE_TOP_K,
            split_seed: 42,
            fractions: DEFAULT_FRACTIONS,
            cutoffs: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub tables: Vec<FeatureTable>,
    pub labels: LabelSet,
    /// Labeled subjects in id order with their folds.
    pub ids: Vec<String>,
    pub folds: Vec<Fold>,
    pub excluded: BTreeMap<Modality, Vec<String>>,
    pub audit: AuditReport,
}

/// Labels, split, per-modality features, the gene variance filter and the
/// leakage audit, in that order. Feature rows are restricted to labeled
/// subjects. The caller decides what to do with a failed audit.
pub fn prepare(raw: &[RawModalityTable], cfg: &PrepareConfig) -> Result<Prepared> {
    let find = |m: Modality| {
        raw.iter()
            .find(|t| t.modality == m)
            .ok_or_else(|| Error::data(format!("no raw tables for {m}")))
    };
    let labels = build_labels(find(Modality::Antibody)?, cfg.cutoffs)?;
    let ids: Vec<String> = labels.rows.iter().map(|r| r.subject_id.clone()).collect();
    let folds = stratified_split(&labels.y1(), cfg.fractions, cfg.split_seed)?;
    let train_ids: HashSet<String> = ids
        .iter()
        .zip(&folds)
        .filter(|(_, f)| **f == Fold::Train)
        .map(|(s, _)| s.clone())
        .collect();
    let labeled: HashSet<&String> = ids.iter().collect();

    let mut tables = Vec::new();
    let mut excluded = BTreeMap::new();
    for m in Modality::ALL {
        let built = build_modality_features(find(m)?)?;
        if !built.excluded.is_empty() {
            log::info!("{m}: {} subjects excluded for a missing timepoint", built.excluded.len());
        }
        excluded.insert(m, built.excluded);
        let mut t = built.table;
        let keep: Vec<usize> = (0..t.subjects.len()).filter(|&i| labeled.contains(&t.subjects[i])).collect();
        t.rows = keep.iter().map(|&i| t.rows[i].clone()).collect();
        t.subjects = keep.iter().map(|&i| t.subjects[i].clone()).collect();
        if m == Modality::Antibody {
            t = strip_pt_family(&t);
        }
        if m == Modality::Gene {
            let k = cfg.gene_top_k.min(t.n_cols());
            if k < cfg.gene_top_k {
                log::warn!("gene table has {} columns, fewer than top-k {}", t.n_cols(), cfg.gene_top_k);
            }
            t = variance_filter_top_k(&t, &train_ids, k)?.1;
        }
        tables.push(t);
    }
    let audit = leakage_audit(&tables, &train_ids);
    Ok(Prepared {
        tables,
        labels,
        ids,
        folds,
        excluded,
        audit,
    })
}
