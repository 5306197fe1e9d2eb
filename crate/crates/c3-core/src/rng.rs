//! Deterministic per-purpose random streams.
//!
//! Every consumer of randomness (weight init, stage-1 noise, test inputs)
//! derives its own ChaCha8 stream from (seed, purpose, index), so adding or
//! reordering one consumer never shifts the values another one sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the purpose string and the two numeric keys, then expanded
/// with splitmix64 into a 32-byte ChaCha seed.
fn derive_key(seed: u64, purpose: &str, index: u64) -> [u8; 32] {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;
    let mut h = FNV_OFFSET;
    for &b in purpose.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    for b in seed.to_le_bytes().into_iter().chain(index.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    let mut out = [0u8; 32];
    let mut state = h;
    for chunk in out.chunks_mut(8) {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    out
}

/// Stream for a named purpose ("init", "noise", ...) and a running index
/// (step number, grid number, ...).
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, purpose, index))
}
