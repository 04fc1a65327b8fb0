//! AdamW with cosine annealing, global-norm clipping, minibatching, and
//! early stopping on mean validation AUROC.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::eval::auroc::{auroc, masked_auroc};
use crate::model::{forward, predict, ModelConfig, ModelParams, SubjectBatch};
use crate::objectives::{supcon_loss, total_loss, LossWeights};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub w_t2: f64,
    pub lambda: f64,
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            weight_decay: 1e-3,
            batch_size: 32,
            max_epochs: 60,
            patience: 10,
            clip_norm: 1.0,
            w_t2: 2.0,
            lambda: 0.1,
            tau: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("tau", self.tau),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("w_t2", self.w_t2), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_t2: self.w_t2,
            lambda: self.lambda,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor2]) -> Self {
        let zeros = |p: &&Tensor2| Tensor2::zeros(p.rows(), p.cols());
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update. Weight decay acts on the weights directly and never
/// enters the moment estimates.
pub fn adamw_step(
    params: &mut [&mut Tensor2],
    grads: &[Tensor2],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config("optimizer state does not match parameters"));
    }
    for (k, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient in parameter tensor {k} at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (state.m[k].values_mut(), state.v[k].values_mut(), grads[k].values());
        for (i, w) in p.values_mut().iter_mut().enumerate() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * weight_decay * *w;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Per-epoch cosine annealing, no warmup or restarts.
pub fn cosine_lr(epoch: usize, max_epochs: usize, base_lr: f64) -> f64 {
    let frac = epoch as f64 / max_epochs.max(1) as f64;
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the pre-clipping norm.
pub fn clip_grad_norm(grads: &mut [Tensor2], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auroc_t1: f64,
    pub val_auroc_t2: Option<f64>,
    pub val_auroc_mean: f64,
    /// True when t2 was undefined and the mean fell back to t1 alone.
    pub t2_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Validation AUROCs: t1 over all subjects, t2 over labeled ones, and their
/// mean (t1 alone when t2 is undefined).
fn validation_score(
    params: &ModelParams,
    config: &ModelConfig,
    val: &SubjectBatch,
) -> Result<(f64, Option<f64>, f64)> {
    let pred = predict(params, config, val)?;
    let a1 = auroc(&pred.scores_t1(), &val.y1)?;
    let a2 = match masked_auroc(&pred.scores_t2(), &val.y2) {
        Ok(a) => Some(a),
        Err(Error::UndefinedAuroc(_)) => None,
        Err(e) => return Err(e),
    };
    let mean = a2.map_or(a1, |a2| 0.5 * (a1 + a2));
    Ok((a1, a2, mean))
}

/// Trains from a seeded initialization and returns the weights of the best
/// validation epoch. One RNG stream drives batch shuffling and all dropout.
pub fn train(
    cohort: &Cohort,
    train_idx: &[usize],
    val_idx: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let val = SubjectBatch::from_cohort(cohort, val_idx);
    if !(val.y1.contains(&0) && val.y1.contains(&1)) {
        return Err(Error::UndefinedAuroc("validation split has one Task-1 class".into()));
    }
    if cohort.dims().iter().any(|&d| d != model_cfg.embed_dim) {
        return Err(Error::config(format!(
            "cohort embedding dims {:?} do not match embed_dim {}",
            cohort.dims(),
            model_cfg.embed_dim
        )));
    }

    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = AdamState::new(&params.iter());
    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    let weights = cfg.loss_weights();

    let mut order = train_idx.to_vec();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut early_stopped = false;

    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = SubjectBatch::from_cohort(cohort, chunk);
            let mut g = Graph::new();
            let pv = params.register(&mut g, true);
            let out = forward(&mut g, &pv, model_cfg, &batch, Some(&mut rng))?;
            let supcon = match (cfg.lambda > 0.0, out.projections) {
                (true, Some(h)) => Some(supcon_loss(&mut g, h, &out.instances, cfg.tau)?),
                _ => None,
            };
            let loss = total_loss(
                &mut g,
                out.logits_t1,
                out.logits_t2,
                &batch.y1,
                &batch.y2,
                supcon,
                weights,
            )?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at epoch {epoch}")));
            }
            g.backward(loss)?;
            let mut grads: Vec<Tensor2> = pv.iter().into_iter().map(|&v| g.grad(v)).collect();
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adamw_step(&mut params.iter_mut(), &grads, &mut state, lr, cfg.weight_decay, hyper)?;
            loss_sum += loss_value;
            n_batches += 1;
        }

        let (a1, a2, mean) = validation_score(&params, model_cfg, &val)?;
        log::debug!("epoch {epoch} lr {lr:.5} loss {:.5} val {mean:.4}", loss_sum / n_batches as f64);
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n_batches as f64,
            val_auroc_t1: a1,
            val_auroc_t2: a2,
            val_auroc_mean: mean,
            t2_fallback: a2.is_none(),
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| mean > *b);
        if improved {
            best = Some((mean, epoch, params.clone()));
        } else if epoch - best.as_ref().expect("set on epoch 0").1 >= cfg.patience {
            early_stopped = true;
            break;
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let stopped_epoch = epochs.last().expect("at least one epoch").epoch;
    Ok(TrainOutcome {
        params: best_params,
        history: TrainHistory {
            epochs,
            best_epoch,
            stopped_epoch,
            early_stopped,
        },
    })
}
