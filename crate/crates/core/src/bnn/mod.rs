//! Bit-packed binarized MLP: XNOR-popcount layers with BN folded into
//! per-neuron thresholds.

mod bits;
mod bn;
mod format;
mod model;

pub use bits::{
    binarize_input, get_bit, pack_signs, set_bit, swap_adjacent_pairs, unpack_signs, words_for,
    PackedBitMatrix, WORD_BITS,
};
pub use bn::{BatchNormParams, Threshold};
pub use format::{decode_model, encode_model, load_model, save_model};
pub use model::{
    argmax, correct_count, correct_count_binarized, evaluate_accuracy, BinarizedSet, BnnLayer,
    BnnModel,
};


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Model with uniformly random weights and plausible BN statistics.
///
/// `dims` lists the widths from input to output, e.g. `[784, 512, 10]`.
/// Used for benchmarks and tests where training is unnecessary.
pub fn random_model(dims: &[usize], seed: u64) -> BnnModel {
    assert!(dims.len() >= 2, "need at least input and output widths");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (in_dim, out_dim) = (w[0], w[1]);
            let weights =
                PackedBitMatrix::from_fn(in_dim, out_dim, |_, _| if rng.random() { 1 } else { -1 });
            let spread = (in_dim as f32).sqrt();
            let bn = BatchNormParams {
                gamma: (0..out_dim).map(|_| rng.random_range(0.2..1.5)).collect(),
                beta: (0..out_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
                mu: (0..out_dim).map(|_| rng.random_range(-spread..spread)).collect(),
                var: (0..out_dim).map(|_| rng.random_range(0.5..2.0) * in_dim as f32).collect(),
                epsilon: 1e-5,
            };
            BnnLayer::validated(weights, Some(bn), l != last, l).expect("valid random layer")
        })
        .collect();
    BnnModel::new(layers, format!("random seed={seed}")).expect("valid random model")
}
