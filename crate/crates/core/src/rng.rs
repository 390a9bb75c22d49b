//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from [`Stream`], a ChaCha8
//! counter-based generator seeded through `SeedableRng::seed_from_u64`. The
//! choice is fixed so generated instance sets are reproducible across
//! platforms and releases of this crate.
//!
//! Sub-streams (one per instance, per epoch, per batch lane) are derived with
//! [`derive_seed`], a SplitMix64 mix of the parent seed and an index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Creates a stream from a 64-bit seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of child stream `index` from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x2545_F491_4F6C_DD1D)))
}

/// Derives a seed from a path of indices, e.g. `(epoch, batch, lane)`.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &i| derive_seed(s, i))
}
