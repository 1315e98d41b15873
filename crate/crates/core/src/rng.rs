//! Seeded, platform-independent randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Generator used for every random draw in the crate.
pub type Prng = ChaCha20Rng;

/// Name recorded in corpus manifests.
pub const PRNG_NAME: &str = "ChaCha20";

pub fn prng(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream` under `base`.
///
/// Lets parallel or reordered generation reproduce the same draws.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let a = mix(base ^ 0x9e37_79b9_7f4a_7c15);
    let b = mix(a ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    mix(b ^ index.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7))
}
