//! Seedable randomness used everywhere: one counter-based generator type and
//! a splitter for deriving independent per-episode streams.

pub use rand_chacha::ChaCha8Rng as EpisodeRng;

/// Derives a child seed from a base seed and a couple of indices.
///
/// SplitMix64 finalizer over the mixed words; distinct (base, tag, index)
/// triples give well-separated streams without any shared state.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
