//! Counter-derived random streams.
//!
//! Every batch of paths is split into fixed-size chunks; chunk `c` draws from
//! the ChaCha8 stream `c` of the base seed, so results do not depend on how
//! chunks are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default number of paths per chunk.
pub const DEFAULT_CHUNK: usize = 1024;

/// Independent generator for chunk `chunk` of the run seeded with `seed`.
pub fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Derive a sub-seed for an independent purpose (bootstrap, multi-start, ...).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser on the combined word
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Half-open path ranges `[start, end)` for each chunk.
pub fn chunk_ranges(n_paths: usize, chunk_size: usize) -> Vec<(usize, usize)> {
    let cs = chunk_size.max(1);
    (0..n_paths.div_ceil(cs))
        .map(|c| (c * cs, ((c + 1) * cs).min(n_paths)))
        .collect()
}
