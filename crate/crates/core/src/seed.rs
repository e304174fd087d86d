//! Deterministic derivation of independent RNG streams from one root seed.
//!
//! Every source of randomness in the crate (parameter init, shuffling,
//! transform sampling, evaluation) draws from its own named stream so that
//! adding draws to one stream never perturbs another. Streams are identified
//! by a tag plus an index path, e.g. `("eval", [env, seed, instance])`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates child seeds derived from structured
/// (low-entropy) inputs such as small integers.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a stream tag, and an index path.
pub fn child_seed(root: u64, tag: &str, path: &[u64]) -> u64 {
    let mut h = mix(root ^ 0xA076_1D64_78BD_642F);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &ix in path {
        h = mix(h ^ ix);
    }
    h
}

/// RNG for the given stream. ChaCha8 keeps streams statistically independent
/// and identical across platforms.
pub fn stream_rng(root: u64, tag: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(root, tag, path))
}
