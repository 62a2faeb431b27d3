//! Deterministic seed derivation.

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `words` into `seed`; distinct word sequences give unrelated streams.
pub fn derive(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(splitmix(seed), |acc, &w| splitmix(acc ^ splitmix(w)))
}

pub fn derive_f64s(seed: u64, values: &[f64]) -> u64 {
    values.iter().fold(splitmix(seed), |acc, v| splitmix(acc ^ splitmix(v.to_bits())))
}
