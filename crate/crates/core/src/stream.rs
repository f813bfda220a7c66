//! Counter-based seeded random streams.
//!
//! Every `(seed, trial, step)` triple maps to its own ChaCha stream, so a
//! draw never depends on which other trials ran first or on which thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream keyed by `(seed, trial, step)`.
pub fn stream(seed: u64, trial: u64, step: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(b"tmptrap\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(step);
    rng
}
