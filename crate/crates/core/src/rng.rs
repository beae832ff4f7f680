//! Seed streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`]. Independent
//! streams are derived from a root seed with [`stream`]: the generator is
//! seeded from `root` and then switched to ChaCha stream `index`. Streams
//! with different indices never overlap, so workers can run in any order and
//! still reproduce the same per-item draws.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// The generator for `(root, index)`.
pub fn stream(root: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(index);
    rng
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
