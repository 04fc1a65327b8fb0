//! Synthetic cohorts with planted signal, anti-correlated labels and
//! cohort-structured modality missingness.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    Cohort, Modality, ModalityMatrix, Priming, Sex, SubjectRecord, MISSING_LABEL, N_MODALITIES,
};
use crate::error::{Error, Result};
use crate::features::{median, stratified_split, LabelRow, DEFAULT_FRACTIONS};
use crate::tensor::Tensor2;

/// Candidate noise draws tried when matching the label correlation target.
const CORRELATION_CANDIDATES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub embed_dim: usize,
    /// Fraction of subjects lacking each modality, in modality order.
    pub missing_rates: [f64; N_MODALITIES],
    pub t1_modality: Modality,
    pub t2_modality: Modality,
    /// Latent-to-embedding signal amplitude along the planted direction.
    pub signal: f64,
    /// Standard deviation of the isotropic embedding noise.
    pub noise_sd: f64,
    /// Spearman target between the two continuous endpoints.
    pub label_correlation: f64,
    /// Fraction of subjects whose Task-2 label is withheld.
    pub y2_missing: f64,
    pub n_cohorts: usize,
    pub first_cohort_year: i32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 158,
            embed_dim: 1536,
            missing_rates: [0.0, 0.386, 0.278, 0.127],
            t1_modality: Modality::Cytokine,
            t2_modality: Modality::Antibody,
            signal: 3.0,
            noise_sd: 1.0,
            label_correlation: -0.58,
            y2_missing: 62.0 / 158.0,
            n_cohorts: 4,
            first_cohort_year: 2020,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::config("synthetic cohort needs at least 10 subjects"));
        }
        if self.embed_dim == 0 || self.n_cohorts == 0 {
            return Err(Error::config("embed_dim and n_cohorts must be positive"));
        }
        if self.missing_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::config("missing rates must lie in [0, 1)"));
        }
        if !(-1.0..=1.0).contains(&self.label_correlation) {
            return Err(Error::config("label correlation must lie in [-1, 1]"));
        }
        if !(0.0..1.0).contains(&self.y2_missing) {
            return Err(Error::config("y2_missing must lie in [0, 1)"));
        }
        if !(self.signal >= 0.0 && self.signal.is_finite()) {
            return Err(Error::config("signal must be finite and non-negative"));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("noise_sd must be finite and positive"));
        }
        Ok(())
    }
}

/// A generated cohort plus the latent quantities behind its labels.
#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub fc_peak: Vec<f64>,
    pub fc_retention: Vec<Option<f64>>,
    /// Spearman correlation of the two endpoints over Task-2 labeled subjects.
    pub realized_spearman: f64,
}

impl SyntheticCohort {
    pub fn label_rows(&self) -> Vec<LabelRow> {
        self.cohort
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| LabelRow {
                subject_id: s.id.clone(),
                fc_peak: self.fc_peak[i],
                y1: s.y1,
                fc_retention: self.fc_retention[i],
                y2: s.y2,
            })
            .collect()
    }
}

fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&midranks(a), &midranks(b))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Median split with ties to class 0.
fn split_at_median(values: &[f64]) -> Vec<u8> {
    let cut = median(values).unwrap_or(0.0);
    values.iter().map(|&v| (v > cut) as u8).collect()
}

/// Picks `count` subjects to lose a modality, walking cohorts in a random
/// order so missingness clusters by cohort. Subjects whose other modalities
/// are already all gone are skipped.
fn cohort_structured_pick(
    rng: &mut ChaCha8Rng,
    cohorts: &[usize],
    n_cohorts: usize,
    count: usize,
    eligible: impl Fn(usize) -> bool,
) -> Result<Vec<usize>> {
    let mut cohort_order: Vec<usize> = (0..n_cohorts).collect();
    cohort_order.shuffle(rng);
    let mut picked = Vec::with_capacity(count);
    for c in cohort_order {
        let mut members: Vec<usize> = (0..cohorts.len()).filter(|&i| cohorts[i] == c && eligible(i)).collect();
        members.shuffle(rng);
        for i in members {
            if picked.len() == count {
                return Ok(picked);
            }
            picked.push(i);
        }
    }
    if picked.len() < count {
        return Err(Error::config(format!(
            "cannot drop {count} subjects without leaving some subject with no modality"
        )));
    }
    Ok(picked)
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn generate_synthetic_cohort(spec: &SyntheticSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let cohorts: Vec<usize> = (0..n).map(|i| i % spec.n_cohorts).collect();
    let n_withheld = (spec.y2_missing * n as f64).round() as usize;
    let withheld = cohort_structured_pick(&mut rng, &cohorts, spec.n_cohorts, n_withheld, |_| true)?;
    let mut has_y2 = vec![true; n];
    for &i in &withheld {
        has_y2[i] = false;
    }
    let labeled: Vec<usize> = (0..n).filter(|&i| has_y2[i]).collect();
    if labeled.len() < 4 {
        return Err(Error::config("too few Task-2 labeled subjects"));
    }

    // Gaussian-copula correlation that yields the Spearman target.
    let rho = 2.0 * (std::f64::consts::PI * spec.label_correlation / 6.0).sin();
    let u1: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..CORRELATION_CANDIDATES {
        let u2: Vec<f64> = u1
            .iter()
            .map(|&a| rho * a + (1.0 - rho * rho).sqrt() * normal(&mut rng))
            .collect();
        let a: Vec<f64> = labeled.iter().map(|&i| u1[i]).collect();
        let b: Vec<f64> = labeled.iter().map(|&i| u2[i]).collect();
        let r = spearman(&a, &b);
        if best.as_ref().map_or(true, |(br, _)| (r - spec.label_correlation).abs() < (br - spec.label_correlation).abs()) {
            best = Some((r, u2));
        }
    }
    let (realized_spearman, u2) = best.expect("at least one candidate");

    let y1 = split_at_median(&u1);
    let labeled_u2: Vec<f64> = labeled.iter().map(|&i| u2[i]).collect();
    let mut y2 = vec![MISSING_LABEL; n];
    for (&i, y) in labeled.iter().zip(split_at_median(&labeled_u2)) {
        y2[i] = y as i8;
    }

    let mut present = vec![[true; N_MODALITIES]; n];
    for m in 0..N_MODALITIES {
        let count = (spec.missing_rates[m] * n as f64).round() as usize;
        let drop = cohort_structured_pick(&mut rng, &cohorts, spec.n_cohorts, count, |i| {
            present[i].iter().enumerate().any(|(k, &p)| p && k != m)
        })?;
        for i in drop {
            present[i][m] = false;
        }
    }

    let t1 = spec.t1_modality.index();
    let t2 = spec.t2_modality.index();
    let modalities = std::array::from_fn(|m| {
        let v1 = unit_direction(&mut rng, spec.embed_dim);
        let v2 = unit_direction(&mut rng, spec.embed_dim);
        let mut values = vec![0.0; n * spec.embed_dim];
        for i in 0..n {
            let row = &mut values[i * spec.embed_dim..(i + 1) * spec.embed_dim];
            for x in row.iter_mut() {
                *x = spec.noise_sd * normal(&mut rng);
            }
            if !present[i][m] {
                row.fill(0.0);
                continue;
            }
            for (k, x) in row.iter_mut().enumerate() {
                if m == t1 {
                    *x += spec.signal * u1[i] * v1[k];
                }
                if m == t2 {
                    *x += spec.signal * u2[i] * v2[k];
                }
            }
        }
        ModalityMatrix {
            modality: Modality::from_index(m),
            values: Tensor2::from_raw(n, spec.embed_dim, values),
        }
    });

    let folds = stratified_split(&y1, DEFAULT_FRACTIONS, spec.seed)?;
    let subjects = (0..n)
        .map(|i| {
            let priming = if rng.gen::<bool>() { Priming::WholeCell } else { Priming::Acellular };
            let sex = if rng.gen::<bool>() { Sex::Male } else { Sex::Female };
            SubjectRecord {
                id: format!("S{:04}", i + 1),
                cohort_year: Some(spec.first_cohort_year + cohorts[i] as i32),
                infancy_vac: priming,
                sex,
                y1: y1[i],
                y2: y2[i],
                present: present[i],
                fold: folds[i],
            }
        })
        .collect();

    Ok(SyntheticCohort {
        cohort: Cohort::new(subjects, modalities)?,
        fc_peak: u1,
        fc_retention: (0..n).map(|i| has_y2[i].then_some(u2[i])).collect(),
        realized_spearman,
    })
}
