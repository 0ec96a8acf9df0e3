//! Criterion benchmarks for the numeric kernels, the temporal encoder and
//! corpus BLEU. Run with `cargo bench -p hialign-bench`.

use hialign_core::numerics::Rng;
use hialign_core::Tensor;

/// A `[rows, cols]` tensor of standard normal draws.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed, 0);
    let data = (0..rows * cols).map(|_| rng.normal() as f32).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

/// `n` sentences over a small vocabulary, lengths between 4 and 19.
pub fn random_sentences(n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = Rng::new(seed, 1);
    (0..n)
        .map(|_| {
            let len = rng.range_inclusive(4, 19);
            (0..len).map(|_| rng.below(40) as u32).collect()
        })
        .collect()
}
