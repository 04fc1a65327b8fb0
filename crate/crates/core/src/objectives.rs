//! Masked cross-entropy, the dual-label supervised contrastive loss, and the
//! weighted joint objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::MISSING_LABEL;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor2};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_CONTRASTIVE_WEIGHT: f64 = 0.1;
pub const DEFAULT_T2_WEIGHT: f64 = 2.0;

/// Mean cross-entropy over rows whose label is not `ignore`. Returns the
/// loss and its gradient w.r.t. the logits (zero rows for ignored labels).
pub fn masked_cross_entropy_value(logits: &Tensor2, labels: &[i8], ignore: i8) -> Result<(f64, Tensor2)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::config(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let mut grad = Tensor2::zeros(n, k);
    let active: Vec<usize> = (0..n).filter(|&i| labels[i] != ignore).collect();
    if active.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / active.len() as f64;
    let mut loss = 0.0;
    for &i in &active {
        let y = labels[i];
        if y < 0 || y as usize >= k {
            return Err(Error::data(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y as usize];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grad[(i, j)] = scale * (p - if j == y as usize { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * scale, grad))
}

/// Graph node for [`masked_cross_entropy_value`] with ignore value -1.
pub fn masked_cross_entropy(g: &mut Graph, logits: Var, labels: &[i8]) -> Result<Var> {
    let (loss, grad) = masked_cross_entropy_value(g.value(logits), labels, MISSING_LABEL)?;
    Ok(g.fused_loss(logits, loss, grad))
}

/// Task labels of one subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPair {
    pub y1: u8,
    pub y2: i8,
}

/// Two subjects are positives when they agree on Task 1, or both carry a
/// Task-2 label and agree on it.
pub fn dual_label_positive(a: LabelPair, b: LabelPair) -> bool {
    a.y1 == b.y1 || (a.y2 != MISSING_LABEL && b.y2 != MISSING_LABEL && a.y2 == b.y2)
}

/// One projected embedding entering the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContrastiveInstance {
    pub subject: usize,
    pub modality: usize,
    pub labels: LabelPair,
}

fn positive_mask(instances: &[ContrastiveInstance]) -> Vec<bool> {
    let n = instances.len();
    let mut pos = vec![false; n * n];
    for a in 0..n {
        for p in 0..n {
            if a == p {
                continue;
            }
            let (ia, ip) = (&instances[a], &instances[p]);
            pos[a * n + p] =
                ia.subject == ip.subject || dual_label_positive(ia.labels, ip.labels);
        }
    }
    pos
}

/// Supervised contrastive loss over row-normalized embeddings `h`
/// (one row per instance). For anchor `a` with positives `P(a)`:
/// `-(1/|P(a)|) * sum_p log(exp(h_a.h_p / tau) / sum_{k != a} exp(h_a.h_k / tau))`,
/// averaged over anchors with at least one positive. Same-subject instances
/// from other modalities are positives.
pub fn supcon_value(
    h: &Tensor2,
    instances: &[ContrastiveInstance],
    tau: f64,
) -> Result<(f64, Tensor2)> {
    let n = h.rows();
    if instances.len() != n {
        return Err(Error::config("one contrastive instance per embedding row"));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let mut grad_h = Tensor2::zeros(n, h.cols());
    if n < 2 {
        return Ok((0.0, grad_h));
    }
    let mut sim = Tensor2::zeros(n, n);
    gemm(1.0 / tau, h, false, h, true, 0.0, &mut sim);
    let pos = positive_mask(instances);
    let anchors: Vec<usize> = (0..n)
        .filter(|&a| pos[a * n..(a + 1) * n].iter().any(|&b| b))
        .collect();
    if anchors.is_empty() {
        return Ok((0.0, grad_h));
    }
    let inv_anchors = 1.0 / anchors.len() as f64;

    // dL/dS, then dL/dH = (G + G^T) H / tau.
    let mut gs = Tensor2::zeros(n, n);
    let mut loss = 0.0;
    for &a in &anchors {
        let row = sim.row(a);
        let max = (0..n)
            .filter(|&k| k != a)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != a).map(|k| (row[k] - max).exp()).sum();
        let lse = max + denom.ln();
        let prow = &pos[a * n..(a + 1) * n];
        let n_pos = prow.iter().filter(|&&b| b).count() as f64;
        let mut anchor_loss = 0.0;
        for k in 0..n {
            if k == a {
                continue;
            }
            let softmax = (row[k] - lse).exp();
            let is_pos = if prow[k] { 1.0 } else { 0.0 };
            if prow[k] {
                anchor_loss -= row[k] - lse;
            }
            gs[(a, k)] = inv_anchors * (softmax - is_pos / n_pos);
        }
        loss += anchor_loss / n_pos;
    }
    let gsym = {
        let mut t = gs.transpose();
        t.add_assign(&gs);
        t
    };
    gemm(1.0 / tau, &gsym, false, h, false, 0.0, &mut grad_h);
    Ok((loss * inv_anchors, grad_h))
}

/// Graph node for [`supcon_value`].
pub fn supcon_loss(
    g: &mut Graph,
    h: Var,
    instances: &[ContrastiveInstance],
    tau: f64,
) -> Result<Var> {
    let (loss, grad) = supcon_value(g.value(h), instances, tau)?;
    Ok(g.fused_loss(h, loss, grad))
}

/// Weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_t2: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_t2: DEFAULT_T2_WEIGHT,
            lambda: DEFAULT_CONTRASTIVE_WEIGHT,
        }
    }
}

/// `CE_t1 + w_t2 * CE_t2 + lambda * supcon`. The Task-2 term is already
/// masked per subject by the ignore label.
pub fn total_loss(
    g: &mut Graph,
    logits_t1: Var,
    logits_t2: Var,
    y1: &[u8],
    y2: &[i8],
    supcon: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    let y1: Vec<i8> = y1.iter().map(|&y| y as i8).collect();
    let ce1 = masked_cross_entropy(g, logits_t1, &y1)?;
    let ce2 = masked_cross_entropy(g, logits_t2, y2)?;
    let mut terms = vec![(ce1, 1.0), (ce2, weights.w_t2)];
    if let Some(s) = supcon {
        terms.push((s, weights.lambda));
    }
    g.weighted_sum(terms)
}
