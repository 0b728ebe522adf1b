//! Stateless derivation of independent random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(master seed, domain, a, b)`.
//! Because the key fully determines the stream, work can be split across
//! threads in any order and still reproduce the single-threaded output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains. Distinct domains never share a key.
pub mod domain {
    pub const HOUSEHOLD_SETUP: u64 = 1;
    pub const HOUSEHOLD_DYNAMICS: u64 = 2;
    pub const RATE_NOISE: u64 = 3;
    pub const AUDIT: u64 = 4;
    pub const ORACLE_MODEL: u64 = 5;
    pub const TRACK_FIXTURE: u64 = 6;
}

pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
