//! Synthetic inputs shared by the benchmarks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const VOCAB: [&str; 24] = [
    "patient", "presents", "with", "fever", "cough", "rash", "sepsis", "asthma", "stroke", "ct", "mri", "head",
    "chest", "pain", "renal", "failure", "acute", "chronic", "treated", "with", "antibiotics", "shows", "no", "bleed",
];

fn sentence(rng: &mut StdRng, words: usize) -> String {
    (0..words).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

/// `n` documents of roughly 60 to 200 tokens, ids `doc-00000` upward.
pub fn corpus(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(60..200);
            (format!("doc-{i:05}"), sentence(&mut rng, len))
        })
        .collect()
}

pub fn query(seed: u64, words: usize) -> String {
    sentence(&mut StdRng::seed_from_u64(seed), words)
}

/// `k` groups of `size` values with ties.
pub fn groups(k: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..k).map(|g| (0..size).map(|_| f64::from(rng.random_range(0..50u8)) + g as f64).collect()).collect()
}
