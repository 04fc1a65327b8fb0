//! Rank-based AUROC.

use crate::error::{Error, Result};

/// Mann-Whitney AUROC with midranks for ties:
/// `P(s_pos > s_neg) + 0.5 * P(s_pos == s_neg)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite score in AUROC input"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of positive ranks, 1-based, ties share the mean rank. Ranks are
    // kept doubled so everything stays an exact integer.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += midrank2 * pos_in_group;
        i = j + 1;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    // U2 = 2 * (R - p(p+1)/2)
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// AUROC restricted to rows whose label is not `-1`.
pub fn masked_auroc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    let (s, y): (Vec<f64>, Vec<u8>) = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y >= 0)
        .map(|(&s, &y)| (s, y as u8))
        .unzip();
    auroc(&s, &y)
}
