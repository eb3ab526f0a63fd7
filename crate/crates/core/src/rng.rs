//! Seed derivation and per-trajectory RNG streams.
//!
//! One root seed deterministically derives every random stream in a
//! run: sub-seeds for distinct purposes come from [`derive_seed`], and
//! each trajectory gets its own ChaCha stream so ensembles can be
//! generated in parallel without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix (splitmix64). Used instead of `DefaultHasher` so
/// seed derivation never depends on the standard library's hasher.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a purpose-specific sub-seed from a root seed and a tag.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    splitmix64(root ^ splitmix64(tag))
}

/// RNG for trajectory `index` under the given seed. Streams are
/// independent across indices, so per-trajectory work can fan out.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Single-stream RNG for non-trajectory draws.
pub fn scalar_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod tags {
    pub const OBSERVED: u64 = 0x01;
    pub const SURROGATE_NOISE: u64 = 0x02;
    pub const INIT_DRIFT: u64 = 0x03;
    pub const INIT_DIFFUSION: u64 = 0x04;
    pub const INIT_JUMP: u64 = 0x05;
    pub const EPOCH: u64 = 0x100;
}
