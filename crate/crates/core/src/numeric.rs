//! Scalar helpers shared by the golden evaluator and the register machine.
//!
//! Both sides must agree bit-for-bit, so min/max and bit manipulation live in
//! one place.

/// NaN-ignoring maximum. On equality (including `-0.0` vs `0.0`) returns `a`.
#[inline(always)]
pub fn max_num(a: f32, b: f32) -> f32 {
    if b > a || a.is_nan() {
        b
    } else {
        a
    }
}

/// NaN-ignoring minimum. On equality (including `-0.0` vs `0.0`) returns `a`.
#[inline(always)]
pub fn min_num(a: f32, b: f32) -> f32 {
    if b < a || a.is_nan() {
        b
    } else {
        a
    }
}

/// Saturate `x` into `[lo, hi]`; NaN saturates to `lo`.
#[inline(always)]
pub fn clamp(x: f32, lo: f32, hi: f32) -> f32 {
    min_num(max_num(x, lo), hi)
}

#[inline]
pub fn flip_bit(x: f32, bit: u8) -> f32 {
    f32::from_bits(x.to_bits() ^ (1u32 << bit))
}

/// Force `bit` of `word` to `stuck` (0 or 1).
#[inline(always)]
pub fn force_bit(word: u32, bit: u8, stuck: bool) -> u32 {
    if stuck {
        word | (1u32 << bit)
    } else {
        word & !(1u32 << bit)
    }
}

/// Index of the largest element; ties and NaNs resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// SplitMix64 finalizer; derives independent per-run seeds from a campaign seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
