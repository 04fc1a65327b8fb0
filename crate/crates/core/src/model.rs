//! The fusion network: per-modality projection heads, modality dropout,
//! masked attention fusion, metadata injection, shared MLP, and two linear
//! task heads.
//!
//! Random draws in a training forward pass happen in this fixed order, all
//! from the run's single RNG stream:
//! 1. modality dropout, subject by subject in batch order;
//! 2. projection-head dropout masks, modality by modality;
//! 3. the shared-MLP dropout mask.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LAYER_NORM_EPS};
use crate::data::{mask_count, Cohort, PresenceMask, N_META, N_MODALITIES};
use crate::error::{Error, Result};
use crate::objectives::{ContrastiveInstance, LabelPair};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub shared_hidden: [usize; 2],
    pub dropout: f64,
    pub modality_dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 1536,
            proj_hidden: 256,
            proj_dim: 64,
            shared_hidden: [256, 64],
            dropout: 0.5,
            modality_dropout_p: 0.4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("proj_hidden", self.proj_hidden),
            ("proj_dim", self.proj_dim),
            ("shared_hidden[0]", self.shared_hidden[0]),
            ("shared_hidden[1]", self.shared_hidden[1]),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.modality_dropout_p) {
            return Err(Error::config(format!(
                "modality_dropout_p {} not in [0, 1)",
                self.modality_dropout_p
            )));
        }
        Ok(())
    }
}

/// One modality's projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub w1: T,
    pub b1: T,
    pub ln_gain: T,
    pub ln_bias: T,
    pub w2: T,
    pub b2: T,
}

/// All trainable weights, generic over the storage (`Tensor2` for values,
/// [`Var`] for graph handles).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub heads: [Head<T>; N_MODALITIES],
    /// Attention query, `proj_dim x 1`.
    pub query: T,
    pub shared_w1: T,
    pub shared_b1: T,
    pub shared_w2: T,
    pub shared_b2: T,
    pub t1_w: T,
    pub t1_b: T,
    pub t2_w: T,
    pub t2_b: T,
}

pub type ModelParams = Params<Tensor2>;
pub type ParamVars = Params<Var>;

const HEAD_FIELDS: [&str; 6] = ["w1", "b1", "ln_gain", "ln_bias", "w2", "b2"];
const TAIL_FIELDS: [&str; 9] = [
    "query", "shared_w1", "shared_b1", "shared_w2", "shared_b2", "t1_w", "t1_b", "t2_w", "t2_b",
];

impl<T> Params<T> {
    /// Names in the canonical order used by checkpoints and the optimizer.
    pub fn names() -> Vec<String> {
        let mut names = Vec::new();
        for m in crate::data::Modality::ALL {
            for f in HEAD_FIELDS {
                names.push(format!("head.{}.{f}", m.name()));
            }
        }
        names.extend(TAIL_FIELDS.iter().map(|s| s.to_string()));
        names
    }

    pub fn iter(&self) -> Vec<&T> {
        let mut out = Vec::with_capacity(N_MODALITIES * 6 + 9);
        for h in &self.heads {
            out.extend([&h.w1, &h.b1, &h.ln_gain, &h.ln_bias, &h.w2, &h.b2]);
        }
        out.extend([
            &self.query,
            &self.shared_w1,
            &self.shared_b1,
            &self.shared_w2,
            &self.shared_b2,
            &self.t1_w,
            &self.t1_b,
            &self.t2_w,
            &self.t2_b,
        ]);
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::with_capacity(N_MODALITIES * 6 + 9);
        for h in &mut self.heads {
            out.extend([
                &mut h.w1,
                &mut h.b1,
                &mut h.ln_gain,
                &mut h.ln_bias,
                &mut h.w2,
                &mut h.b2,
            ]);
        }
        out.extend([
            &mut self.query,
            &mut self.shared_w1,
            &mut self.shared_b1,
            &mut self.shared_w2,
            &mut self.shared_b2,
            &mut self.t1_w,
            &mut self.t1_b,
            &mut self.t2_w,
            &mut self.t2_b,
        ]);
        out
    }

    /// Rebuilds from a vector in canonical order.
    pub fn from_vec(items: Vec<T>) -> Result<Self> {
        if items.len() != N_MODALITIES * 6 + 9 {
            return Err(Error::config("wrong number of parameter tensors"));
        }
        let mut it = items.into_iter();
        let mut next = || it.next().expect("length checked");
        let heads = std::array::from_fn(|_| Head {
            w1: next(),
            b1: next(),
            ln_gain: next(),
            ln_bias: next(),
            w2: next(),
            b2: next(),
        });
        Ok(Params {
            heads,
            query: next(),
            shared_w1: next(),
            shared_b1: next(),
            shared_w2: next(),
            shared_b2: next(),
            t1_w: next(),
            t1_b: next(),
            t2_w: next(),
            t2_b: next(),
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let names = Self::names();
        let mapped = self
            .iter()
            .into_iter()
            .zip(&names)
            .map(|(t, n)| f(n, t))
            .collect();
        Params::from_vec(mapped).expect("same layout")
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor2 {
    let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor2::from_raw(rows, cols, values)
}

impl ModelParams {
    /// Fan-in scaled uniform initialization: weights and biases of a layer
    /// with fan-in `d` are drawn from `U(-1/sqrt(d), 1/sqrt(d))`; layer norm
    /// starts at gain 1, bias 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (uniform(rng, fan_in, fan_out, bound), uniform(rng, 1, fan_out, bound))
        };
        let heads = std::array::from_fn(|_| {
            let (w1, b1) = linear(&mut rng, config.embed_dim, config.proj_hidden);
            let (w2, b2) = linear(&mut rng, config.proj_hidden, config.proj_dim);
            Head {
                w1,
                b1,
                ln_gain: Tensor2::filled(1, config.proj_hidden, 1.0),
                ln_bias: Tensor2::zeros(1, config.proj_hidden),
                w2,
                b2,
            }
        });
        let query = uniform(&mut rng, config.proj_dim, 1, 1.0 / (config.proj_dim as f64).sqrt());
        let (shared_w1, shared_b1) = linear(&mut rng, config.proj_dim + N_META, config.shared_hidden[0]);
        let (shared_w2, shared_b2) = linear(&mut rng, config.shared_hidden[0], config.shared_hidden[1]);
        let (t1_w, t1_b) = linear(&mut rng, config.shared_hidden[1], 2);
        let (t2_w, t2_b) = linear(&mut rng, config.shared_hidden[1], 2);
        Ok(Params {
            heads,
            query,
            shared_w1,
            shared_b1,
            shared_w2,
            shared_b2,
            t1_w,
            t1_b,
            t2_w,
            t2_b,
        })
    }

    /// Expected shape of every tensor under `config`, canonical order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for _ in 0..N_MODALITIES {
            out.extend([
                (config.embed_dim, config.proj_hidden),
                (1, config.proj_hidden),
                (1, config.proj_hidden),
                (1, config.proj_hidden),
                (config.proj_hidden, config.proj_dim),
                (1, config.proj_dim),
            ]);
        }
        out.extend([
            (config.proj_dim, 1),
            (config.proj_dim + N_META, config.shared_hidden[0]),
            (1, config.shared_hidden[0]),
            (config.shared_hidden[0], config.shared_hidden[1]),
            (1, config.shared_hidden[1]),
            (config.shared_hidden[1], 2),
            (1, 2),
            (config.shared_hidden[1], 2),
            (1, 2),
        ]);
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.iter().iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `g`, trainable or fixed.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        self.map(|_, t| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }
}

/// Training-time modality dropout: each present modality is dropped with
/// probability `p`; an all-dropped draw is rejected and redrawn. Absent
/// modalities stay absent.
pub fn apply_modality_dropout<R: Rng>(mask: PresenceMask, p: f64, rng: &mut R) -> PresenceMask {
    if p <= 0.0 || mask_count(&mask) == 0 {
        return mask;
    }
    loop {
        let mut out = mask;
        for bit in out.iter_mut().filter(|b| **b) {
            if rng.gen::<f64>() < p {
                *bit = false;
            }
        }
        if mask_count(&out) > 0 {
            return out;
        }
    }
}

/// Model inputs for a set of subjects.
#[derive(Clone, Debug)]
pub struct SubjectBatch {
    /// Cohort row index of every batch row.
    pub subjects: Vec<usize>,
    /// One `n x embed_dim` matrix per modality; absent rows are never read.
    pub embeddings: [Tensor2; N_MODALITIES],
    pub masks: Vec<PresenceMask>,
    /// `n x 2` binary metadata.
    pub metadata: Tensor2,
    pub y1: Vec<u8>,
    pub y2: Vec<i8>,
}

impl SubjectBatch {
    pub fn from_cohort(cohort: &Cohort, idx: &[usize]) -> SubjectBatch {
        let masks = idx.iter().map(|&i| cohort.subjects[i].present).collect();
        Self::with_masks(cohort, idx, masks)
    }

    /// Like [`SubjectBatch::from_cohort`] with overridden presence masks.
    /// Masks can only remove modalities the cohort actually has.
    pub fn with_masks(cohort: &Cohort, idx: &[usize], masks: Vec<PresenceMask>) -> SubjectBatch {
        let masks = masks
            .into_iter()
            .zip(idx)
            .map(|(m, &i)| std::array::from_fn(|k| m[k] && cohort.subjects[i].present[k]))
            .collect();
        let embeddings = std::array::from_fn(|m| cohort.modalities[m].values.gather_rows(idx));
        let metadata = Tensor2::from_raw(
            idx.len(),
            N_META,
            idx.iter().flat_map(|&i| cohort.subjects[i].metadata()).collect(),
        );
        SubjectBatch {
            subjects: idx.to_vec(),
            embeddings,
            masks,
            metadata,
            y1: cohort.y1(idx),
            y2: cohort.y2(idx),
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// Graph handles and side outputs of one forward pass.
pub struct ForwardOutput {
    pub logits_t1: Var,
    pub logits_t2: Var,
    /// Stacked unit-norm projections of every modality that entered fusion.
    pub projections: Option<Var>,
    /// One entry per row of `projections`.
    pub instances: Vec<ContrastiveInstance>,
    /// `n x 4` attention weights (zero rows for subjects with no modality).
    pub attention: Tensor2,
    /// Masks actually used by fusion (after modality dropout).
    pub masks: Vec<PresenceMask>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor2 {
    let keep = 1.0 - p;
    let values = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor2::from_raw(rows, cols, values)
}

/// Training-mode randomness. `None` means inference: no dropout of any kind.
pub type TrainRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Runs the network on `batch`.
pub fn forward(
    g: &mut Graph,
    params: &ParamVars,
    config: &ModelConfig,
    batch: &SubjectBatch,
    mut rng: TrainRng<'_>,
) -> Result<ForwardOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::config("forward on an empty batch"));
    }
    for (m, e) in batch.embeddings.iter().enumerate() {
        if e.cols() != config.embed_dim || e.rows() != n {
            return Err(Error::config(format!(
                "modality {m} embeddings are {}x{}, expected {n}x{}",
                e.rows(),
                e.cols(),
                config.embed_dim
            )));
        }
    }

    let masks: Vec<PresenceMask> = match rng.as_deref_mut() {
        Some(r) => batch
            .masks
            .iter()
            .map(|&m| apply_modality_dropout(m, config.modality_dropout_p, r))
            .collect(),
        None => batch.masks.clone(),
    };

    // Projection heads, run only on rows that reach fusion.
    let mut spread: [Option<Var>; N_MODALITIES] = [None; N_MODALITIES];
    let mut stacked = Vec::new();
    let mut instances = Vec::new();
    for m in 0..N_MODALITIES {
        let rows: Vec<usize> = (0..n).filter(|&i| masks[i][m]).collect();
        if rows.is_empty() {
            continue;
        }
        let head = &params.heads[m];
        let x = g.constant(batch.embeddings[m].gather_rows(&rows));
        let a = g.linear(x, head.w1, head.b1)?;
        let a = g.layer_norm(a, head.ln_gain, head.ln_bias, LAYER_NORM_EPS)?;
        let mut a = g.gelu(a);
        if let Some(r) = rng.as_deref_mut() {
            if config.dropout > 0.0 {
                let mask = dropout_mask(r, rows.len(), config.proj_hidden, config.dropout);
                a = g.mul_const(a, mask)?;
            }
        }
        let p = g.linear(a, head.w2, head.b2)?;
        let h = g.l2_normalize_rows(p)?;
        stacked.push(h);
        for &i in &rows {
            instances.push(ContrastiveInstance {
                subject: batch.subjects[i],
                modality: m,
                labels: LabelPair {
                    y1: batch.y1[i],
                    y2: batch.y2[i],
                },
            });
        }
        spread[m] = Some(g.scatter_rows(h, rows, n)?);
    }

    // Attention over present modalities only.
    let mut score_cols = Vec::with_capacity(N_MODALITIES);
    for s in &spread {
        score_cols.push(match s {
            Some(h) => g.matmul(*h, params.query)?,
            None => g.constant(Tensor2::zeros(n, 1)),
        });
    }
    let scores = g.concat_cols(score_cols)?;
    let live: Vec<usize> = (0..n).filter(|&i| mask_count(&masks[i]) > 0).collect();
    let attention = if live.is_empty() {
        g.constant(Tensor2::zeros(n, N_MODALITIES))
    } else {
        let live_scores = g.gather_rows(scores, live.clone())?;
        let flat: Vec<bool> = live.iter().flat_map(|&i| masks[i]).collect();
        let alpha = g.masked_softmax_rows(live_scores, flat)?;
        g.scatter_rows(alpha, live, n)?
    };
    let mut fused_terms = Vec::new();
    for (m, s) in spread.iter().enumerate() {
        if let Some(h) = s {
            fused_terms.push((g.scale_rows_by_column(*h, attention, m)?, 1.0));
        }
    }
    let fused = if fused_terms.is_empty() {
        g.constant(Tensor2::zeros(n, config.proj_dim))
    } else {
        g.weighted_sum(fused_terms)?
    };

    // Metadata joins after fusion; the attention never sees it.
    let meta = g.constant(batch.metadata.clone());
    let z = g.concat_cols(vec![fused, meta])?;
    let hidden = g.linear(z, params.shared_w1, params.shared_b1)?;
    let mut hidden = g.gelu(hidden);
    if let Some(r) = rng.as_deref_mut() {
        if config.dropout > 0.0 {
            let mask = dropout_mask(r, n, config.shared_hidden[0], config.dropout);
            hidden = g.mul_const(hidden, mask)?;
        }
    }
    let shared = g.linear(hidden, params.shared_w2, params.shared_b2)?;
    let logits_t1 = g.linear(shared, params.t1_w, params.t1_b)?;
    let logits_t2 = g.linear(shared, params.t2_w, params.t2_b)?;

    let projections = match stacked.len() {
        0 => None,
        1 => Some(stacked[0]),
        _ => Some(g.concat_rows(stacked)?),
    };
    Ok(ForwardOutput {
        logits_t1,
        logits_t2,
        projections,
        instances,
        attention: g.value(attention).clone(),
        masks,
    })
}

/// Inference outputs for a set of subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub logits_t1: Tensor2,
    pub logits_t2: Tensor2,
    pub attention: Tensor2,
}

impl Predictions {
    /// Class-1 logit margin, the score used for AUROC.
    pub fn scores_t1(&self) -> Vec<f64> {
        (0..self.logits_t1.rows())
            .map(|i| self.logits_t1[(i, 1)] - self.logits_t1[(i, 0)])
            .collect()
    }

    pub fn scores_t2(&self) -> Vec<f64> {
        (0..self.logits_t2.rows())
            .map(|i| self.logits_t2[(i, 1)] - self.logits_t2[(i, 0)])
            .collect()
    }
}

/// Deterministic inference (no dropout of any kind).
pub fn predict(params: &ModelParams, config: &ModelConfig, batch: &SubjectBatch) -> Result<Predictions> {
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let out = forward(&mut g, &pv, config, batch, None)?;
    Ok(Predictions {
        logits_t1: g.value(out.logits_t1).clone(),
        logits_t2: g.value(out.logits_t2).clone(),
        attention: out.attention,
    })
}

pub const CHECKPOINT_FORMAT: &str = "immunofuse-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// On-disk parameter checkpoint. JSON floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: &ModelParams) -> Self {
        let tensors = ModelParams::names()
            .into_iter()
            .zip(params.iter())
            .map(|(name, t)| NamedTensor {
                name,
                rows: t.rows(),
                cols: t.cols(),
                values: t.values().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            tensors,
        }
    }

    pub fn into_params(self) -> Result<(ModelConfig, ModelParams)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        let names = ModelParams::names();
        let shapes = ModelParams::expected_shapes(&self.config);
        if self.tensors.len() != names.len() {
            return Err(Error::config("checkpoint tensor count mismatch"));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for ((t, name), shape) in self.tensors.into_iter().zip(&names).zip(shapes) {
            if &t.name != name || (t.rows, t.cols) != shape {
                return Err(Error::config(format!(
                    "checkpoint tensor {} ({}x{}) does not match {name} {shape:?}",
                    t.name, t.rows, t.cols
                )));
            }
            tensors.push(Tensor2::new(t.rows, t.cols, t.values)?);
        }
        Ok((self.config, Params::from_vec(tensors)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gelu_scalar, masked_softmax};

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            proj_hidden: 5,
            proj_dim: 4,
            shared_hidden: [7, 3],
            dropout: 0.5,
            modality_dropout_p: 0.4,
        }
    }

    fn batch(n: usize, masks: Vec<PresenceMask>, seed: u64) -> SubjectBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SubjectBatch {
            subjects: (0..n).collect(),
            embeddings: std::array::from_fn(|_| uniform(&mut rng, n, 6, 2.0)),
            masks,
            metadata: Tensor2::from_raw(n, 2, (0..2 * n).map(|k| (k % 3 == 0) as u8 as f64).collect()),
            y1: (0..n).map(|i| (i % 2) as u8).collect(),
            y2: (0..n).map(|i| [0, 1, -1][i % 3]).collect(),
        }
    }

    #[test]
    fn projection_is_unit_norm_and_inference_deterministic() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let b = batch(5, vec![[true; 4]; 5], 2);
        let mut g = Graph::new();
        let pv = params.register(&mut g, false);
        let out = forward(&mut g, &pv, &cfg, &b, None).unwrap();
        let h = g.value(out.projections.unwrap());
        assert_eq!(h.rows(), 20);
        for i in 0..h.rows() {
            let n: f64 = h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let p1 = predict(&params, &cfg, &b).unwrap();
        let p2 = predict(&params, &cfg, &b).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.logits_t1.shape(), (5, 2));
        assert_eq!(p1.logits_t2.shape(), (5, 2));
    }

    #[test]
    fn projection_closed_form() {
        // W1 = 0, b1 = 0, LN bias = c: the hidden layer is constant gelu(c),
        // so the head output is gelu(c) * column sums of W2, normalized.
        let cfg = small_config();
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        let c = 0.7;
        let head = &mut params.heads[0];
        head.w1 = Tensor2::zeros(6, 5);
        head.b1 = Tensor2::zeros(1, 5);
        head.ln_bias = Tensor2::filled(1, 5, c);
        let mut w2 = Tensor2::zeros(5, 4);
        for j in 0..4 {
            w2[(j, j)] = 1.0;
        }
        w2[(4, 0)] = 1.0;
        head.w2 = w2;
        head.b2 = Tensor2::zeros(1, 4);
        let b = batch(2, vec![[true, false, false, false]; 2], 4);
        let mut g = Graph::new();
        let pv = params.register(&mut g, false);
        let out = forward(&mut g, &pv, &cfg, &b, None).unwrap();
        let h = g.value(out.projections.unwrap());
        let s = gelu_scalar(c);
        let raw = [2.0 * s, s, s, s];
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..2 {
            for j in 0..4 {
                assert!((h[(i, j)] - raw[j] / norm).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn modality_dropout_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let full = [true; 4];
        assert_eq!(apply_modality_dropout(full, 0.0, &mut rng), full);
        let single = [true, false, false, false];
        for _ in 0..1000 {
            assert_eq!(apply_modality_dropout(single, 0.4, &mut rng), single);
        }
        let partial = [false, true, true, false];
        for _ in 0..1000 {
            let out = apply_modality_dropout(partial, 0.9, &mut rng);
            assert!(!out[0] && !out[3]);
            assert!(mask_count(&out) >= 1);
        }
    }

    #[test]
    fn fusion_single_and_symmetric_cases() {
        let cfg = small_config();
        let mut params = ModelParams::init(&cfg, 5).unwrap();
        let b = batch(3, vec![[false, true, false, false]; 3], 6);
        let mut g = Graph::new();
        let pv = params.register(&mut g, false);
        let out = forward(&mut g, &pv, &cfg, &b, None).unwrap();
        for i in 0..3 {
            assert_eq!(out.attention.row(i), &[0.0, 1.0, 0.0, 0.0]);
        }

        // zero query: equal scores, uniform weights
        params.query = Tensor2::zeros(cfg.proj_dim, 1);
        let b = batch(2, vec![[true; 4]; 2], 6);
        let p = predict(&params, &cfg, &b).unwrap();
        for i in 0..2 {
            assert!(p.attention.row(i).iter().all(|&a| (a - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_matches_masked_softmax() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let masks = vec![[true, false, true, true], [false, false, false, true], [true; 4]];
        let b = batch(3, masks.clone(), 10);
        let mut g = Graph::new();
        let pv = params.register(&mut g, false);
        let out = forward(&mut g, &pv, &cfg, &b, None).unwrap();
        let h = g.value(out.projections.unwrap()).clone();
        // rebuild scores from the stacked projections
        let mut scores = vec![vec![0.0; 4]; 3];
        for (row, inst) in out.instances.iter().enumerate() {
            scores[inst.subject][inst.modality] = h
                .row(row)
                .iter()
                .zip(params.query.values())
                .map(|(a, b)| a * b)
                .sum();
        }
        for i in 0..3 {
            let expected = masked_softmax(&scores[i], &masks[i]).unwrap();
            for m in 0..4 {
                assert!((out.attention[(i, m)] - expected[m]).abs() < 1e-15);
            }
            let s: f64 = out.attention.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn meta_only_subjects_depend_on_metadata_only() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 12).unwrap();
        let mut b = batch(4, vec![[false; 4]; 4], 13);
        b.metadata = Tensor2::new(4, 2, vec![1., 0., 1., 0., 0., 1., 0., 0.]).unwrap();
        let p = predict(&params, &cfg, &b).unwrap();
        assert_eq!(p.logits_t1.row(0), p.logits_t1.row(1));
        assert_eq!(p.logits_t2.row(0), p.logits_t2.row(1));
        assert_ne!(p.logits_t1.row(0), p.logits_t1.row(2));
        assert!(p.attention.values().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::new(&cfg, &params).save(&path).unwrap();
        let (cfg2, params2) = Checkpoint::load(&path).unwrap().into_params().unwrap();
        assert_eq!(cfg, cfg2);
        for (a, b) in params.iter().into_iter().zip(params2.iter()) {
            let bits_a: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 21).unwrap();
        let mut ck = Checkpoint::new(&cfg, &params);
        ck.tensors[0].rows += 1;
        assert!(ck.into_params().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.modality_dropout_p = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            proj_dim: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
