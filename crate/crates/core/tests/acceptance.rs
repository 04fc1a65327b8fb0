//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero if any criterion fails. Pass a substring to run a subset.
//!
//! The real-data criterion runs only when `IMMUNOFUSE_REAL_DATA` names a
//! dataset directory with exported embeddings; otherwise it is waived.

use std::time::{Duration, Instant};

use immunofuse_core::autodiff::{grad_check, Graph, Var};
use immunofuse_core::data::{Cohort, Modality, PresenceMask, N_MODALITIES};
use immunofuse_core::eval::ablation::{ablation_runner, AblationCell};
use immunofuse_core::eval::auroc;
use immunofuse_core::eval::contribution::contribution_analysis;
use immunofuse_core::eval::permutation::{permutation_test, PermutationConfig};
use immunofuse_core::eval::report::test_summary;
use immunofuse_core::eval::synth::{generate_synthetic_cohort, SyntheticSpec};
use immunofuse_core::eval::{evaluate, fit, Splits};
use immunofuse_core::io::load_dataset;
use immunofuse_core::model::{
    apply_modality_dropout, forward, predict, Checkpoint, ModelConfig, ModelParams, SubjectBatch,
};
use immunofuse_core::objectives::{
    dual_label_positive, masked_cross_entropy, supcon_loss, supcon_value, total_loss, ContrastiveInstance,
    LabelPair, LossWeights,
};
use immunofuse_core::train::TrainConfig;
use immunofuse_core::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

enum Outcome {
    Pass(String),
    Fail(String),
    Waived(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 5,
        proj_hidden: 6,
        proj_dim: 4,
        shared_hidden: [6, 4],
        ..ModelConfig::default()
    }
}

/// Scalar readout with random weights so every output entry matters.
fn readout(g: &mut Graph, y: Var, rng_seed: u64) -> immunofuse_core::Result<Var> {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random(&mut rng, r, c);
    let z = g.mul_const(y, w)?;
    Ok(g.sum(z))
}

// ---------------------------------------------------------------------------

fn gradient_correctness() -> Verdict {
    const FD: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    type Op = Box<dyn Fn(&mut Graph, Var) -> immunofuse_core::Result<Var>>;
    for point in 0..10u64 {
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 3, 5);
        let row = random(&mut rng, 1, 3);
        let same = random(&mut rng, 4, 3);
        let gain = random(&mut rng, 1, 3);
        let mask_c = random(&mut rng, 4, 3);
        let weights4 = random(&mut rng, 4, 2);
        let soft_mask: Vec<bool> = (0..12).map(|k| k % 3 != 1 || k == 4).collect();
        let labels: Vec<i8> = vec![0, 1, -1, 1];
        let (h, inst) = contrastive_batch(&mut rng, 8, 3);
        let s = point;
        let ops: Vec<(&str, Tensor2, Op)> = vec![
            ("matmul(x, W)", a.clone(), {
                let b = b.clone();
                Box::new(move |g, x| {
                    let w = g.constant(b.clone());
                    let y = g.matmul(x, w)?;
                    readout(g, y, s)
                })
            }),
            ("matmul(X, w)", b.clone(), {
                let a = a.clone();
                Box::new(move |g, w| {
                    let x = g.constant(a.clone());
                    let y = g.matmul(x, w)?;
                    readout(g, y, s)
                })
            }),
            ("add_row(x, b)", a.clone(), {
                let row = row.clone();
                Box::new(move |g, x| {
                    let b = g.constant(row.clone());
                    let y = g.add_row(x, b)?;
                    readout(g, y, s)
                })
            }),
            ("add_row(X, b)", row.clone(), {
                let a = a.clone();
                Box::new(move |g, b| {
                    let x = g.constant(a.clone());
                    let y = g.add_row(x, b)?;
                    readout(g, y, s)
                })
            }),
            ("add", a.clone(), {
                let same = same.clone();
                Box::new(move |g, x| {
                    let c = g.constant(same.clone());
                    let y = g.add(x, c)?;
                    readout(g, y, s)
                })
            }),
            ("scale", a.clone(), Box::new(move |g, x| {
                let y = g.scale(x, -1.7);
                readout(g, y, s)
            })),
            ("gelu", a.clone(), Box::new(move |g, x| {
                let y = g.gelu(x);
                readout(g, y, s)
            })),
            ("layer_norm(x)", a.clone(), {
                let (gain, row) = (gain.clone(), row.clone());
                Box::new(move |g, x| {
                    let gn = g.constant(gain.clone());
                    let bs = g.constant(row.clone());
                    let y = g.layer_norm(x, gn, bs, 1e-5)?;
                    readout(g, y, s)
                })
            }),
            ("layer_norm(gain)", gain.clone(), {
                let (a, row) = (a.clone(), row.clone());
                Box::new(move |g, gn| {
                    let x = g.constant(a.clone());
                    let bs = g.constant(row.clone());
                    let y = g.layer_norm(x, gn, bs, 1e-5)?;
                    readout(g, y, s)
                })
            }),
            ("layer_norm(bias)", row.clone(), {
                let (a, gain) = (a.clone(), gain.clone());
                Box::new(move |g, bs| {
                    let x = g.constant(a.clone());
                    let gn = g.constant(gain.clone());
                    let y = g.layer_norm(x, gn, bs, 1e-5)?;
                    readout(g, y, s)
                })
            }),
            ("l2_normalize_rows", a.clone(), Box::new(move |g, x| {
                let y = g.l2_normalize_rows(x)?;
                readout(g, y, s)
            })),
            ("mul_const", a.clone(), {
                let c = mask_c.clone();
                Box::new(move |g, x| {
                    let y = g.mul_const(x, c.clone())?;
                    readout(g, y, s)
                })
            }),
            ("gather_rows", a.clone(), Box::new(move |g, x| {
                let y = g.gather_rows(x, vec![3, 0, 3, 1])?;
                readout(g, y, s)
            })),
            ("scatter_rows", a.clone(), Box::new(move |g, x| {
                let y = g.scatter_rows(x, vec![5, 0, 2, 3], 6)?;
                readout(g, y, s)
            })),
            ("masked_softmax_rows", a.clone(), {
                let m = soft_mask.clone();
                Box::new(move |g, x| {
                    let y = g.masked_softmax_rows(x, m.clone())?;
                    readout(g, y, s)
                })
            }),
            ("scale_rows_by_column(x)", a.clone(), {
                let w = weights4.clone();
                Box::new(move |g, x| {
                    let wv = g.constant(w.clone());
                    let y = g.scale_rows_by_column(x, wv, 1)?;
                    readout(g, y, s)
                })
            }),
            ("scale_rows_by_column(w)", weights4.clone(), {
                let a = a.clone();
                Box::new(move |g, wv| {
                    let x = g.constant(a.clone());
                    let y = g.scale_rows_by_column(x, wv, 1)?;
                    readout(g, y, s)
                })
            }),
            ("concat_cols", a.clone(), {
                let same = same.clone();
                Box::new(move |g, x| {
                    let c = g.constant(same.clone());
                    let y = g.concat_cols(vec![c, x, x])?;
                    readout(g, y, s)
                })
            }),
            ("concat_rows", a.clone(), {
                let same = same.clone();
                Box::new(move |g, x| {
                    let c = g.constant(same.clone());
                    let y = g.concat_rows(vec![x, c, x])?;
                    readout(g, y, s)
                })
            }),
            ("sum", a.clone(), Box::new(|g, x| Ok(g.sum(x)))),
            ("weighted_sum", a.clone(), {
                let same = same.clone();
                Box::new(move |g, x| {
                    let c = g.constant(same.clone());
                    let y = g.weighted_sum(vec![(x, 0.3), (c, 2.0), (x, -1.1)])?;
                    readout(g, y, s)
                })
            }),
            ("masked_cross_entropy", Tensor2::new(4, 2, a.values()[..8].to_vec()).unwrap(), {
                let labels = labels.clone();
                Box::new(move |g, x| masked_cross_entropy(g, x, &labels))
            }),
            ("supcon_loss", h.clone(), {
                let inst = inst.clone();
                Box::new(move |g, x| {
                    let u = g.l2_normalize_rows(x)?;
                    supcon_loss(g, u, &inst, 0.3)
                })
            }),
        ];
        for (name, at, op) in ops {
            let err = grad_check(|g, x| op(g, x), &at, FD).map_err(|e| format!("{name}: {e}"))?;
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }

    // Full objective, every parameter coordinate, training-mode forward
    // with the dropout draws replayed from a fixed seed.
    let cfg = tiny_model();
    let spec = SyntheticSpec {
        n: 24,
        embed_dim: cfg.embed_dim,
        ..SyntheticSpec::default()
    };
    let cohort = generate_synthetic_cohort(&spec).map_err(|e| e.to_string())?.cohort;
    let idx: Vec<usize> = (0..12).collect();
    let batch = SubjectBatch::from_cohort(&cohort, &idx);
    let weights = LossWeights::default();
    let mut full_worst = 0.0f64;
    for point in 0..10u64 {
        let params = ModelParams::init(&cfg, 100 + point).map_err(|e| e.to_string())?;
        let loss_of = |p: &ModelParams, grads: bool| -> immunofuse_core::Result<(f64, Vec<Tensor2>)> {
            let mut g = Graph::new();
            let pv = p.register(&mut g, true);
            let mut rng = ChaCha8Rng::seed_from_u64(point);
            let out = forward(&mut g, &pv, &cfg, &batch, Some(&mut rng))?;
            let sc = match out.projections {
                Some(h) => Some(supcon_loss(&mut g, h, &out.instances, 0.3)?),
                None => None,
            };
            let loss = total_loss(&mut g, out.logits_t1, out.logits_t2, &batch.y1, &batch.y2, sc, weights)?;
            let value = g.value(loss).item();
            if !grads {
                return Ok((value, Vec::new()));
            }
            g.backward(loss)?;
            Ok((value, pv.iter().into_iter().map(|&v| g.grad(v)).collect()))
        };
        let (_, analytic) = loss_of(&params, true).map_err(|e| e.to_string())?;
        let mut probe = params.clone();
        for (t, grad) in analytic.iter().enumerate() {
            for k in 0..grad.len() {
                let orig = probe.iter()[t].values()[k];
                probe.iter_mut()[t].values_mut()[k] = orig + FD;
                let up = loss_of(&probe, false).map_err(|e| e.to_string())?.0;
                probe.iter_mut()[t].values_mut()[k] = orig - FD;
                let down = loss_of(&probe, false).map_err(|e| e.to_string())?.0;
                probe.iter_mut()[t].values_mut()[k] = orig;
                let fd = (up - down) / (2.0 * FD);
                full_worst = full_worst.max((grad.values()[k] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    worst.push(("total_loss", full_worst));

    let elapsed = start.elapsed();
    let (name, max) = worst.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    check(
        max < TOL && elapsed < Duration::from_secs(30),
        format!(
            "{} ops + total_loss over 10 points, max rel err {max:.2e} ({name}), {:.1}s",
            worst.len() - 1,
            elapsed.as_secs_f64()
        ),
    )
}

fn pair_count_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auroc_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=20);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 * 0.25).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied += 1;
        }
        let a = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((a - pair_count_auroc(&scores, &labels)).abs());
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("200 instances ({tied} with ties), max |diff| {worst:.1e}, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn masking_contract() -> Verdict {
    let cfg = tiny_model();
    let spec = SyntheticSpec {
        n: 40,
        embed_dim: cfg.embed_dim,
        ..SyntheticSpec::default()
    };
    let cohort = generate_synthetic_cohort(&spec).map_err(|e| e.to_string())?.cohort;
    let params = ModelParams::init(&cfg, 5).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..cohort.len()).collect();
    let batch = SubjectBatch::from_cohort(&cohort, &idx);
    let absent: usize = batch.masks.iter().map(|m| m.iter().filter(|&&p| !p).count()).sum();

    // (1) garbage in absent blocks changes nothing
    let mut garbage = batch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (m, e) in garbage.embeddings.iter_mut().enumerate() {
        for (i, mask) in batch.masks.iter().enumerate() {
            if !mask[m] {
                e.row_mut(i).iter_mut().for_each(|v| *v = rng.gen_range(-1e6..1e6));
            }
        }
    }
    let a = predict(&params, &cfg, &batch).map_err(|e| e.to_string())?;
    let b = predict(&params, &cfg, &garbage).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor2| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let invariant = bits(&a.logits_t1) == bits(&b.logits_t1) && bits(&a.logits_t2) == bits(&b.logits_t2);

    // (2) attention sums to one over present modalities and is zero elsewhere
    let mut attn_err = 0.0f64;
    let mut attn_on_absent = 0.0f64;
    for (i, mask) in batch.masks.iter().enumerate() {
        let row = a.attention.row(i);
        let present_sum: f64 = (0..N_MODALITIES).filter(|&m| mask[m]).map(|m| row[m]).sum();
        attn_err = attn_err.max((present_sum - 1.0).abs());
        attn_on_absent += (0..N_MODALITIES).filter(|&m| !mask[m]).map(|m| row[m].abs()).sum::<f64>();
    }

    // (3) fully absent modality gets exactly zero gradient
    let gone = Modality::Cell.index();
    let masks: Vec<PresenceMask> = batch
        .masks
        .iter()
        .map(|m| {
            let mut m = *m;
            m[gone] = false;
            if !m.iter().any(|&p| p) {
                m[Modality::Antibody.index()] = true;
            }
            m
        })
        .collect();
    let constructed = SubjectBatch::with_masks(&cohort, &idx, masks);
    let mut g = Graph::new();
    let pv = params.register(&mut g, true);
    let mut trng = ChaCha8Rng::seed_from_u64(3);
    let out = forward(&mut g, &pv, &cfg, &constructed, Some(&mut trng)).map_err(|e| e.to_string())?;
    let sc = supcon_loss(&mut g, out.projections.unwrap(), &out.instances, 0.3).map_err(|e| e.to_string())?;
    let loss = total_loss(
        &mut g,
        out.logits_t1,
        out.logits_t2,
        &constructed.y1,
        &constructed.y2,
        Some(sc),
        LossWeights::default(),
    )
    .map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;
    let head = &pv.heads[gone];
    let head_grad_abs: f64 = [head.w1, head.b1, head.ln_gain, head.ln_bias, head.w2, head.b2]
        .iter()
        .map(|&v| g.grad(v).values().iter().map(|x| x.abs()).sum::<f64>())
        .sum();
    let other_grad: f64 = g.grad(pv.heads[Modality::Antibody.index()].w1).values().iter().map(|x| x.abs()).sum();

    check(
        invariant && attn_err <= 1e-12 && attn_on_absent == 0.0 && head_grad_abs == 0.0 && other_grad > 0.0,
        format!(
            "logits bitwise invariant={invariant} over {absent} absent blocks; attention |sum-1| max {attn_err:.1e}; \
             absent-head |grad| sum {head_grad_abs}"
        ),
    )
}

fn dropout_statistics() -> Verdict {
    const P: f64 = 0.4;
    const DRAWS: usize = 100_000;
    // exact conditional law by enumeration of the 16 keep/drop outcomes
    let mut exact = [0.0f64; 16];
    for (code, e) in exact.iter_mut().enumerate() {
        let dropped = code.count_ones() as i32;
        *e = P.powi(dropped) * (1.0 - P).powi(4 - dropped);
    }
    let z = 1.0 - exact[15];
    exact[15] = 0.0;
    exact.iter_mut().for_each(|e| *e /= z);
    let exact_rate: Vec<f64> = (0..4)
        .map(|m| (0..16).filter(|c| c & (1 << m) != 0).map(|c| exact[c]).sum())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = [0usize; 16];
    for _ in 0..DRAWS {
        let kept = apply_modality_dropout([true; N_MODALITIES], P, &mut rng);
        let code = (0..4).filter(|&m| !kept[m]).fold(0, |c, m| c | (1 << m));
        counts[code] += 1;
    }
    let rate: Vec<f64> = (0..4)
        .map(|m| (0..16).filter(|c| c & (1 << m) != 0).map(|c| counts[c]).sum::<usize>() as f64 / DRAWS as f64)
        .collect();
    let rate_err = rate.iter().zip(&exact_rate).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let outcome_err = (0..16)
        .map(|c| (counts[c] as f64 / DRAWS as f64 - exact[c]).abs())
        .fold(0.0, f64::max);
    check(
        rate_err <= 0.01 && outcome_err <= 0.01 && counts[15] == 0,
        format!(
            "per-modality drop rate {:.4?} vs exact {:.4}, max err {rate_err:.4}; 16-outcome max err {outcome_err:.4}; \
             all-dropped {}",
            rate, exact_rate[0], counts[15]
        ),
    )
}

fn contrastive_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Tensor2, Vec<ContrastiveInstance>) {
    let subjects = (n / 2).max(1);
    let labels: Vec<LabelPair> = (0..subjects)
        .map(|_| LabelPair {
            y1: rng.gen_range(0..2),
            y2: rng.gen_range(-1..2),
        })
        .collect();
    let inst = (0..n)
        .map(|i| {
            let s = rng.gen_range(0..subjects);
            ContrastiveInstance {
                subject: s,
                modality: i % N_MODALITIES,
                labels: labels[s],
            }
        })
        .collect();
    (random(rng, n, dim), inst)
}

fn unit_rows(t: &Tensor2) -> Tensor2 {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let norm = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Straight summation from the loss definition.
fn supcon_direct(h: &Tensor2, inst: &[ContrastiveInstance], tau: f64) -> f64 {
    let n = h.rows();
    let dot = |a: usize, b: usize| h.row(a).iter().zip(h.row(b)).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| {
                p != a && (inst[a].subject == inst[p].subject || dual_label_positive(inst[a].labels, inst[p].labels))
            })
            .collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&k| k != a).map(|k| (dot(a, k) / tau).exp()).sum();
        let mut s = 0.0;
        for &p in &positives {
            s += ((dot(a, p) / tau).exp() / denom).ln();
        }
        total += -s / positives.len() as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Tensor2 {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in &cols {
            let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut q = Tensor2::zeros(d, d);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            q.values_mut()[i * d + j] = v;
        }
    }
    q
}

fn supcon_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst, mut rot_worst) = (0.0f64, 0.0f64);
    let mut with_missing = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=12);
        let d = rng.gen_range(2..=6);
        let (raw, inst) = contrastive_batch(&mut rng, n, d);
        if inst.iter().any(|i| i.labels.y2 == -1) && inst.iter().any(|i| i.labels.y2 != -1) {
            with_missing += 1;
        }
        let h = unit_rows(&raw);
        let tau = rng.gen_range(0.1..1.0);
        let (value, _) = supcon_value(&h, &inst, tau).map_err(|e| e.to_string())?;
        worst = worst.max((value - supcon_direct(&h, &inst, tau)).abs());
        let q = random_rotation(&mut rng, d);
        let rotated = immunofuse_core::tensor::matmul(&h, &q).map_err(|e| e.to_string())?;
        let (rv, _) = supcon_value(&rotated, &inst, tau).map_err(|e| e.to_string())?;
        rot_worst = rot_worst.max((rv - value).abs());
    }
    check(
        worst <= 1e-10 && rot_worst <= 1e-10,
        format!(
            "100 batches ({with_missing} with mixed missing y2): max |diff| {worst:.1e}, rotation max |diff| {rot_worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Protocol criteria on synthetic cohorts.

const SYNTH_DIM: usize = 32;

fn synth_model() -> ModelConfig {
    ModelConfig {
        embed_dim: SYNTH_DIM,
        ..ModelConfig::default()
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

fn permutation_calibration() -> Verdict {
    let start = Instant::now();
    let spec = SyntheticSpec {
        embed_dim: SYNTH_DIM,
        signal: 0.0,
        ..SyntheticSpec::default()
    };
    let cohort = generate_synthetic_cohort(&spec).map_err(|e| e.to_string())?.cohort;
    let (mcfg, tcfg) = (synth_model(), TrainConfig::default());
    let out = fit(&cohort, &mcfg, &tcfg).map_err(|e| e.to_string())?;
    let test = Splits::from_cohort(&cohort).test;
    let (observed, _) = evaluate(&out.params, &mcfg, &cohort, &test, None).map_err(|e| e.to_string())?;
    let pcfg = PermutationConfig {
        n: 200,
        base_seed: 2024,
        workers: workers(),
    };
    let r = permutation_test(&cohort, &mcfg, &tcfg, observed, &pcfg).map_err(|e| e.to_string())?;
    let in_band = |m: f64| (0.45..=0.55).contains(&m);
    let elapsed = start.elapsed();
    check(
        in_band(r.null_summary_t1.mean)
            && in_band(r.null_summary_t2.mean)
            && r.p_t1 > 0.2
            && r.p_t2 > 0.2
            && elapsed < Duration::from_secs(600),
        format!(
            "n={} N=200: null mean {:.3}/{:.3} (sd {:.3}/{:.3}), observed {:.3}/{:.3}, p {:.3}/{:.3}, {} retried, {:.0}s on {} workers",
            cohort.len(),
            r.null_summary_t1.mean,
            r.null_summary_t2.mean,
            r.null_summary_t1.sd,
            r.null_summary_t2.sd,
            r.observed_t1,
            r.observed_t2,
            r.p_t1,
            r.p_t2,
            r.retried.len(),
            elapsed.as_secs_f64(),
            pcfg.workers
        ),
    )
}

/// Planted cohort: t1 signal in cytokine, t2 in antibody, default
/// missingness and label anti-correlation.
fn planted_cohort() -> Result<Cohort, String> {
    let spec = SyntheticSpec {
        n: 400,
        embed_dim: SYNTH_DIM,
        signal: 3.0,
        noise_sd: 0.25,
        ..SyntheticSpec::default()
    };
    Ok(generate_synthetic_cohort(&spec).map_err(|e| e.to_string())?.cohort)
}

fn planted_recovery() -> Verdict {
    let start = Instant::now();
    let cohort = planted_cohort()?;
    let mcfg = synth_model();
    let out = fit(&cohort, &mcfg, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let test = Splits::from_cohort(&cohort).test;
    let (a, _) = evaluate(&out.params, &mcfg, &cohort, &test, None).map_err(|e| e.to_string())?;
    let r = contribution_analysis(&out.params, &mcfg, &cohort, &test).map_err(|e| e.to_string())?;
    let t2 = a.t2.unwrap_or(f64::NAN);
    let ranks = [r.koo_argmax(1), r.loo_argmax(1), r.koo_argmax(2), r.loo_argmax(2)];
    let want = [Some(Modality::Cytokine), Some(Modality::Cytokine), Some(Modality::Antibody), Some(Modality::Antibody)];
    let elapsed = start.elapsed();
    check(
        a.t1 >= 0.85 && t2 >= 0.80 && ranks == want && elapsed < Duration::from_secs(300),
        format!(
            "test AUROC {:.3}/{t2:.3}; KOO/LOO argmax t1 {:?}/{:?}, t2 {:?}/{:?} on {} complete-case subjects; {:.1}s",
            a.t1,
            ranks[0],
            ranks[1],
            ranks[2],
            ranks[3],
            r.n_subjects,
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_direction() -> Verdict {
    let cohort = planted_cohort()?;
    let rows = ablation_runner(&cohort, &synth_model(), &TrainConfig::default(), 42, workers())
        .map_err(|e| e.to_string())?;
    let t1 = |c: AblationCell| rows.iter().find(|r| r.cell == c).map(|r| r.auroc_t1).unwrap_or(f64::NAN);
    let full = t1(AblationCell::Full);
    let gap_lambda = full - t1(AblationCell::NoContrastive);
    let gap_dropout = full - t1(AblationCell::NoModalityDropout);
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.cell.name(), r.auroc_t1)).collect();
    check(
        gap_lambda >= 0.03 && gap_dropout >= 0.03,
        format!(
            "t1 AUROC {}; full minus lambda=0 {gap_lambda:+.3}, full minus p=0 {gap_dropout:+.3} (need >= 0.03)",
            table.join(", ")
        ),
    )
}

fn real_data_replication() -> Option<Verdict> {
    let dir = std::env::var_os("IMMUNOFUSE_REAL_DATA")?;
    Some((|| {
        let dir = std::path::PathBuf::from(dir);
        let mcfg = ModelConfig::default();
        let loaded = load_dataset(&dir, Some(mcfg.embed_dim), 42).map_err(|e| e.to_string())?;
        let cohort = loaded.cohort;
        let out = fit(&cohort, &mcfg, &TrainConfig::default()).map_err(|e| e.to_string())?;
        let test = Splits::from_cohort(&cohort).test;
        let (s, _) = test_summary(&out.params, &mcfg, &cohort, &test, 1000, 42).map_err(|e| e.to_string())?;
        let t2 = s.auroc.t2.unwrap_or(f64::NAN);
        let ci2 = s.ci_t2.as_ref().map_or((f64::NAN, f64::NAN), |c| (c.lo, c.hi));
        let overlaps = |lo: f64, hi: f64, a: f64, b: f64| lo <= b && a <= hi;
        check(
            (s.auroc.t1 - 0.797).abs() <= 0.05
                && (t2 - 0.755).abs() <= 0.07
                && overlaps(s.ci_t1.lo, s.ci_t1.hi, 0.621, 0.948)
                && overlaps(ci2.0, ci2.1, 0.519, 0.945),
            format!(
                "test AUROC {:.3} [{:.3}, {:.3}] / {t2:.3} [{:.3}, {:.3}], n_test {} (t2 {})",
                s.auroc.t1, s.ci_t1.lo, s.ci_t1.hi, ci2.0, ci2.1, s.n_test, s.n_test_t2
            ),
        )
    })())
}

fn determinism() -> Verdict {
    let spec = SyntheticSpec {
        embed_dim: SYNTH_DIM,
        ..SyntheticSpec::default()
    };
    let cohort = generate_synthetic_cohort(&spec).map_err(|e| e.to_string())?.cohort;
    let (mcfg, tcfg) = (synth_model(), TrainConfig::default());
    let test = Splits::from_cohort(&cohort).test;
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let out = fit(&cohort, &mcfg, &tcfg).map_err(|e| e.to_string())?;
        ckpts.push(serde_json::to_string(&Checkpoint::new(&mcfg, &out.params)).map_err(|e| e.to_string())?);
        let (s, _) = test_summary(&out.params, &mcfg, &cohort, &test, 1000, 42).map_err(|e| e.to_string())?;
        reports.push(serde_json::to_string(&(s, &out.history)).map_err(|e| e.to_string())?);
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ckpt.json");
    let restored: Checkpoint = serde_json::from_str(&ckpts[0]).map_err(|e| e.to_string())?;
    restored.save(&path).map_err(|e| e.to_string())?;
    let (cfg2, p2) = Checkpoint::load(&path).and_then(Checkpoint::into_params).map_err(|e| e.to_string())?;
    let round_trip = serde_json::to_string(&Checkpoint::new(&cfg2, &p2)).map_err(|e| e.to_string())? == ckpts[0];

    let out = fit(&cohort, &mcfg, &tcfg).map_err(|e| e.to_string())?;
    let (observed, _) = evaluate(&out.params, &mcfg, &cohort, &test, None).map_err(|e| e.to_string())?;
    let run = |w: usize| {
        permutation_test(&cohort, &mcfg, &tcfg, observed, &PermutationConfig { n: 16, base_seed: 5, workers: w })
            .map_err(|e| e.to_string())
    };
    let (r1, r8) = (run(1)?, run(8)?);
    let same_perm = r1 == r8;
    check(
        ckpts[0] == ckpts[1] && reports[0] == reports[1] && round_trip && same_perm,
        format!(
            "checkpoints identical={}, reports identical={}, save/load bitwise={round_trip}, \
             permute 1 vs 8 workers identical={same_perm} (p {:.4}/{:.4})",
            ckpts[0] == ckpts[1],
            reports[0] == reports[1],
            r1.p_t1,
            r1.p_t2
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let criteria: Vec<(&str, fn() -> Option<Verdict>)> = vec![
        ("gradient_correctness", || Some(gradient_correctness())),
        ("auroc_oracle", || Some(auroc_oracle())),
        ("masking_contract", || Some(masking_contract())),
        ("modality_dropout_statistics", || Some(dropout_statistics())),
        ("supcon_oracle", || Some(supcon_oracle())),
        ("permutation_calibration", || Some(permutation_calibration())),
        ("planted_signal_recovery", || Some(planted_recovery())),
        ("ablation_direction", || Some(ablation_direction())),
        ("real_data_replication", real_data_replication),
        ("determinism", || Some(determinism())),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !wanted(name) {
            continue;
        }
        ran += 1;
        let outcome = match f() {
            Some(Ok(d)) => Outcome::Pass(d),
            Some(Err(d)) => Outcome::Fail(d),
            None => Outcome::Waived("IMMUNOFUSE_REAL_DATA not set; no public dataset or exported embeddings".into()),
        };
        match outcome {
            Outcome::Pass(d) => println!("acceptance {name}: PASS  {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("acceptance {name}: FAIL  {d}");
            }
            Outcome::Waived(d) => println!("acceptance {name}: WAIVED  {d}"),
        }
    }
    println!("acceptance: {ran} criteria, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
