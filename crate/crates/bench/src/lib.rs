//! Shared fixtures for the criterion benches.

use hybnn_core::bnn::{BnnConfig, BnnModel};
use hybnn_core::rng::stream_rng;
use hybnn_core::BitVector;
use rand::Rng;

pub fn random_codes(n: usize, bits: usize, seed: u64) -> Vec<BitVector> {
    let mut rng = stream_rng(seed, 0);
    (0..n)
        .map(|_| BitVector::from_bools((0..bits).map(|_| rng.gen_bool(0.5))))
        .collect()
}

/// Untrained classifier with the default widths.
pub fn classifier(seed: u64) -> BnnModel {
    BnnModel::new(BnnConfig { seed, ..BnnConfig::default() }).expect("default config is valid")
}
