//! Fixtures shared by the benchmarks.

use immunofuse_core::eval::synth::{generate_synthetic_cohort, SyntheticSpec};
use immunofuse_core::data::Cohort;
use immunofuse_core::objectives::{ContrastiveInstance, LabelPair};
use immunofuse_core::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The default-sized synthetic cohort at a given embedding width.
pub fn cohort(embed_dim: usize) -> Cohort {
    let spec = SyntheticSpec {
        embed_dim,
        ..SyntheticSpec::default()
    };
    generate_synthetic_cohort(&spec).expect("default spec is feasible").cohort
}

/// Scores with roughly half positives and some ties.
pub fn scores_and_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let scores = labels
        .iter()
        .map(|&y| (y as f64 + rng.gen::<f64>() * 2.0 * 100.0).round() / 100.0)
        .collect();
    (scores, labels)
}

/// Unit-norm rows with four instances per subject.
pub fn contrastive_batch(subjects: usize, dim: usize, seed: u64) -> (Tensor2, Vec<ContrastiveInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = subjects * 4;
    let mut values: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in values.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let instances = (0..n)
        .map(|i| ContrastiveInstance {
            subject: i / 4,
            modality: i % 4,
            labels: LabelPair {
                y1: ((i / 4) % 2) as u8,
                y2: [-1, 0, 1][(i / 4) % 3],
            },
        })
        .collect();
    (Tensor2::new(n, dim, values).expect("shape matches"), instances)
}
