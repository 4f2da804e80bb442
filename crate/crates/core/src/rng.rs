use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic streams derived from one seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_VAE_SHUFFLE: u64 = 2;
pub(crate) const STREAM_BASELINE_SHUFFLE: u64 = 3;
pub(crate) const STREAM_PARTITION: u64 = 4;
/// Classifier shuffling; client `k` of a federation uses `STREAM_BNN_SHUFFLE + k`.
pub(crate) const STREAM_BNN_SHUFFLE: u64 = 1 << 16;
