//! Reference classifiers on concatenated modality blocks: L2 logistic
//! regression (L-BFGS) and a two-layer MLP trained with AdamW.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_ci, BootstrapCi, DEFAULT_RESAMPLES};
use crate::autodiff::{Graph, Var};
use crate::data::{Cohort, N_MODALITIES};
use crate::error::{Error, Result};
use crate::objectives::masked_cross_entropy;
use crate::tensor::Tensor2;
use crate::train::{adamw_step, AdamHyper, AdamState};

/// What fills an absent modality block before standardization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFill {
    /// Per-feature mean over training subjects that have the modality.
    TrainMean,
    Zero,
}

/// Concatenated, imputed, train-standardized features.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    /// One row per cohort subject.
    pub x: Tensor2,
    /// Subjects with at least one filled block.
    pub imputed: Vec<bool>,
}

pub fn design_matrix(cohort: &Cohort, train_idx: &[usize], fill: BlockFill) -> Result<DesignMatrix> {
    let n = cohort.len();
    let dims = cohort.dims();
    let total: usize = dims.iter().sum();
    let mut x = Tensor2::zeros(n, total);
    let mut imputed = vec![false; n];
    let mut offset = 0;
    for m in 0..N_MODALITIES {
        let d = dims[m];
        let block = &cohort.modalities[m].values;
        let fill_row = match fill {
            BlockFill::Zero => vec![0.0; d],
            BlockFill::TrainMean => {
                let rows: Vec<usize> = train_idx.iter().copied().filter(|&i| cohort.subjects[i].present[m]).collect();
                let mut mean = vec![0.0; d];
                for &i in &rows {
                    for (acc, v) in mean.iter_mut().zip(block.row(i)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= rows.len().max(1) as f64);
                mean
            }
        };
        for i in 0..n {
            let src = if cohort.subjects[i].present[m] {
                block.row(i)
            } else {
                imputed[i] = true;
                &fill_row
            };
            x.row_mut(i)[offset..offset + d].copy_from_slice(src);
        }
        offset += d;
    }
    // z-score with train statistics
    for j in 0..total {
        let mean = train_idx.iter().map(|&i| x[(i, j)]).sum::<f64>() / train_idx.len() as f64;
        let var = train_idx.iter().map(|&i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / train_idx.len() as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            x[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    Ok(DesignMatrix { x, imputed })
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Objective `sum_i logloss_i + |w|^2 / (2C)` and its gradient; the last
/// coordinate of `theta` is the unpenalized intercept.
fn logistic_objective(x: &Tensor2, y: &[u8], c: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let d = x.cols();
    let (w, b) = (&theta[..d], theta[d]);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut f = 0.0;
    for i in 0..x.rows() {
        let row = x.row(i);
        let z = b + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let yi = y[i] as f64;
        f += log1p_exp(z) - yi * z;
        let r = sigmoid(z) - yi;
        for (g, a) in grad[..d].iter_mut().zip(row) {
            *g += r * a;
        }
        grad[d] += r;
    }
    for j in 0..d {
        f += w[j] * w[j] / (2.0 * c);
        grad[j] += w[j] / c;
    }
    f
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const LBFGS_MEMORY: usize = 10;

/// L2 logistic regression fitted with L-BFGS and Armijo backtracking until
/// the gradient norm drops below `tol` or `max_iter` is reached.
pub fn fit_logistic(x: &Tensor2, y: &[u8], c: f64, tol: f64, max_iter: usize) -> Result<LogisticModel> {
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(Error::config("logistic regression needs matching, nonempty inputs"));
    }
    if !(c > 0.0) {
        return Err(Error::config("C must be positive"));
    }
    let p = x.cols() + 1;
    let mut theta = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut f = logistic_objective(x, y, c, &theta, &mut grad);
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut new_grad = vec![0.0; p];
    let mut iterations = 0;
    while iterations < max_iter && dot(&grad, &grad).sqrt() > tol {
        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, yv, _)) = hist.back() {
            let gamma = dot(s, yv) / dot(yv, yv);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, yv, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(yv, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
            hist.clear();
        }
        let mut step = if hist.is_empty() { 1.0 / dot(&grad, &grad).sqrt().max(1.0) } else { 1.0 };
        let mut trial = vec![0.0; p];
        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..p {
                trial[k] = theta[k] + step * dir[k];
            }
            let f_new = logistic_objective(x, y, c, &trial, &mut new_grad);
            // Near the optimum objective differences sink below rounding;
            // then a step that shrinks the gradient counts as progress.
            let flat = (f_new - f).abs() <= 1e-12 * f.abs().max(1.0) && dot(&new_grad, &new_grad) < dot(&grad, &grad);
            if f_new <= f + 1e-4 * step * slope || flat {
                let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > f64::EPSILON * dot(&yv, &yv) {
                    if hist.len() == LBFGS_MEMORY {
                        hist.pop_front();
                    }
                    hist.push_back((s, yv, 1.0 / sy));
                }
                theta.copy_from_slice(&trial);
                grad.copy_from_slice(&new_grad);
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let grad_norm = dot(&grad, &grad).sqrt();
    let converged = grad_norm <= tol;
    if !converged {
        log::warn!("logistic regression stopped at gradient norm {grad_norm:.3e} after {iterations} iterations");
    }
    let d = x.cols();
    Ok(LogisticModel {
        weights: theta[..d].to_vec(),
        intercept: theta[d],
        iterations,
        grad_norm,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabMlpConfig {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TabMlpConfig {
    fn default() -> Self {
        TabMlpConfig {
            hidden: [128, 64],
            dropout: 0.3,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 150,
        }
    }
}

pub struct TabMlp {
    layers: Vec<(Tensor2, Tensor2)>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor2 {
    let keep = 1.0 - p;
    let v = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor2::new(rows, cols, v).expect("finite mask")
}

fn mlp_forward(
    g: &mut Graph,
    vars: &[(Var, Var)],
    x: Tensor2,
    mut dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<Var> {
    let mut h = g.constant(x);
    for (k, &(w, b)) in vars.iter().enumerate() {
        h = g.linear(h, w, b)?;
        if k + 1 < vars.len() {
            h = g.gelu(h);
            if let Some((rng, p)) = dropout.as_mut() {
                let (rows, cols) = g.shape(h);
                let mask = dropout_mask(rng, rows, cols, *p);
                h = g.mul_const(h, mask)?;
            }
        }
    }
    Ok(h)
}

impl TabMlp {
    pub fn fit(x: &Tensor2, y: &[u8], cfg: &TabMlpConfig, seed: u64) -> Result<TabMlp> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [x.cols(), cfg.hidden[0], cfg.hidden[1], 2];
        let mut layers: Vec<(Tensor2, Tensor2)> = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = |r: usize, c: usize| {
                    Tensor2::new(r, c, (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect()).expect("finite")
                };
                (draw(w[0], w[1]), draw(1, w[1]))
            })
            .collect();
        let mut state = {
            let refs: Vec<&Tensor2> = layers.iter().flat_map(|(w, b)| [w, b]).collect();
            AdamState::new(&refs)
        };
        let labels: Vec<i8> = y.iter().map(|&v| v as i8).collect();
        let mut order: Vec<usize> = (0..x.rows()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut g = Graph::new();
                let vars: Vec<_> = layers.iter().map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone()))).collect();
                let logits = mlp_forward(&mut g, &vars, x.gather_rows(chunk), Some((&mut rng, cfg.dropout)))?;
                let yb: Vec<i8> = chunk.iter().map(|&i| labels[i]).collect();
                let loss = masked_cross_entropy(&mut g, logits, &yb)?;
                g.backward(loss)?;
                let grads: Vec<Tensor2> = vars.iter().flat_map(|&(w, b)| [g.grad(w), g.grad(b)]).collect();
                let mut refs: Vec<&mut Tensor2> = layers.iter_mut().flat_map(|(w, b)| [w, b]).collect();
                adamw_step(&mut refs, &grads, &mut state, cfg.lr, cfg.weight_decay, AdamHyper::default())?;
            }
        }
        Ok(TabMlp { layers })
    }

    /// Class-1 logit margins.
    pub fn scores(&self, x: &Tensor2) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<_> = self
            .layers
            .iter()
            .map(|(w, b)| (g.constant(w.clone()), g.constant(b.clone())))
            .collect();
        let out = mlp_forward(&mut g, &vars, x.clone(), None)?;
        let l = g.value(out);
        Ok((0..l.rows()).map(|i| l[(i, 1)] - l[(i, 0)]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    LogisticRegression,
    TabMlp,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::LogisticRegression => "logistic_regression",
            BaselineMethod::TabMlp => "tab_mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: BaselineMethod,
    pub features: String,
    pub task: u8,
    pub n_train: usize,
    pub n_test: usize,
    pub auroc: Option<f64>,
    pub ci: Option<BootstrapCi>,
    /// Every test score identical.
    pub degenerate: bool,
    /// Logistic regression only.
    pub converged: Option<bool>,
    pub n_imputed_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub mlp: TabMlpConfig,
    pub seed: u64,
    pub bootstrap_seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            c: 1.0,
            tol: 1e-8,
            max_iter: 2000,
            mlp: TabMlpConfig::default(),
            seed: 42,
            bootstrap_seed: 42,
        }
    }
}

/// Both baselines on both tasks. Task-2 fits and scores use labeled
/// subjects only.
pub fn run_baselines(
    cohort: &Cohort,
    train_idx: &[usize],
    test_idx: &[usize],
    fill: BlockFill,
    features: &str,
    cfg: &BaselineConfig,
) -> Result<Vec<BaselineRow>> {
    let dm = design_matrix(cohort, train_idx, fill)?;
    let mut rows = Vec::new();
    for task in [1u8, 2] {
        let keep = |i: &usize| task == 1 || cohort.subjects[*i].has_y2();
        let tr: Vec<usize> = train_idx.iter().copied().filter(keep).collect();
        let te: Vec<usize> = test_idx.iter().copied().filter(keep).collect();
        let label = |i: usize| if task == 1 { cohort.subjects[i].y1 } else { cohort.subjects[i].y2 as u8 };
        let ytr: Vec<u8> = tr.iter().map(|&i| label(i)).collect();
        let yte: Vec<u8> = te.iter().map(|&i| label(i)).collect();
        let xtr = dm.x.gather_rows(&tr);
        let xte = dm.x.gather_rows(&te);
        let n_imputed_test = te.iter().filter(|&&i| dm.imputed[i]).count();

        for method in [BaselineMethod::LogisticRegression, BaselineMethod::TabMlp] {
            let (scores, converged) = match method {
                BaselineMethod::LogisticRegression => {
                    let m = fit_logistic(&xtr, &ytr, cfg.c, cfg.tol, cfg.max_iter)?;
                    ((0..xte.rows()).map(|i| m.decision(xte.row(i))).collect::<Vec<_>>(), Some(m.converged))
                }
                BaselineMethod::TabMlp => (TabMlp::fit(&xtr, &ytr, &cfg.mlp, cfg.seed)?.scores(&xte)?, None),
            };
            let degenerate = scores.windows(2).all(|w| w[0] == w[1]);
            let ci = match bootstrap_ci(&scores, &yte, DEFAULT_RESAMPLES, cfg.bootstrap_seed) {
                Ok(ci) => Some(ci),
                Err(Error::UndefinedAuroc(_)) => None,
                Err(e) => return Err(e),
            };
            rows.push(BaselineRow {
                method,
                features: features.to_string(),
                task,
                n_train: tr.len(),
                n_test: te.len(),
                auroc: ci.map(|c| c.point),
                ci,
                degenerate,
                converged,
                n_imputed_test,
            });
        }
    }
    Ok(rows)
}
