//! Deterministic random-stream derivation.
//!
//! All stochastic components draw from ChaCha8 streams derived from a master
//! seed plus a list of labels (stream id, step index, slot index, ...).
//! Deriving streams by label rather than splitting a sequential generator
//! makes training resumable and order-independent: step `n` sees the same
//! randomness whether the run started at step 0 or was resumed from a
//! checkpoint.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels used across the crate. Keeping them in one place avoids
/// accidental stream collisions between subsystems.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const EXAMPLE: u64 = 3;
    pub const TOY_DATA: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const CROP: u64 = 7;
    pub const ANALYSIS: u64 = 8;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a master seed and labels.
pub fn derive_rng(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &label in labels {
        state ^= label.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    let mut kstate = acc;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut kstate).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
