//! Seeded random streams.
//!
//! Every consumer draws from its own named substream of a single root seed,
//! so adding a new consumer never shifts the numbers seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SAMPLER: &str = "sampler";
pub const INIT: &str = "init";
pub const PROBE: &str = "probe";
pub const SPLIT: &str = "split";

fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Substream `name` of the root `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    indexed_stream(seed, name, 0)
}

/// Substream `name` of the root `seed`, further split by `index`
/// (training phase, probe repeat, ...).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name).rotate_left(17));
    rng.set_stream(fnv1a(name).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng
}
