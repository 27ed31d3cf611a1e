//! Shared fixtures for the criterion benchmarks.

use mammo_core::patchset::PatchRecord;
use mammo_core::synthgen::{generate_dataset, SynthCounts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` synthetic patches alternating pathological and normal, so any
/// prefix of even length has both classes.
pub fn patches(n: usize, seed: u64) -> Vec<PatchRecord> {
    let half = n.div_ceil(2);
    let counts = SynthCounts {
        mass: half,
        calcification: 0,
        normal: half,
    };
    let records = generate_dataset(counts, seed).expect("synthetic corpus");
    let (pos, neg): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.label().is_positive());
    pos.into_iter().zip(neg).flat_map(|(p, q)| [p, q]).take(n).collect()
}

/// Labels and scores where positives score higher on average.
pub fn scored(n: usize, seed: u64) -> (Vec<bool>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 3 == 0;
            let score = rng.random::<f64>() * 0.7 + if label { 0.3 } else { 0.0 };
            (label, score)
        })
        .unzip()
}
