//! Seed derivation for independent, reproducible RNG streams.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of item `index` in the named `stream` from a master seed.
///
/// Streams keep, e.g., trajectory seeds and crop seeds uncorrelated even when
/// they share an index.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = mix(master);
    for b in stream.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}
