//! Seed derivation.
//!
//! Every random decision in the crate flows from an explicit `u64` seed
//! through one of these derivations, never from a shared mutable RNG. Record
//! streams are keyed by `(seed, epoch, record index)` so augmentation draws do
//! not depend on batch order or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates structured seed inputs.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn mix2(a: u64, b: u64) -> u64 {
    mix(mix(a) ^ b)
}

#[inline]
pub fn mix3(a: u64, b: u64, c: u64) -> u64 {
    mix(mix2(a, b) ^ c)
}

/// Stream for one record's augmentation draws in one epoch.
pub fn record_stream(seed: u64, epoch: usize, record: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix3(seed, epoch as u64, record as u64))
}

/// Stream for the epoch shuffle.
pub fn epoch_stream(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix3(seed, 0x5348_5546, epoch as u64))
}

/// Stream for one generated synthetic image.
pub fn image_stream(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix3(seed, 0x53_594e, index as u64))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn record_streams_are_schedule_independent() {
        let a = record_stream(7, 3, 41).next_u64();
        let b = record_stream(7, 3, 41).next_u64();
        assert_eq!(a, b);
        // Neighbouring records, epochs, and seeds all get distinct streams.
        assert_ne!(a, record_stream(7, 3, 42).next_u64());
        assert_ne!(a, record_stream(7, 4, 41).next_u64());
        assert_ne!(a, record_stream(8, 3, 41).next_u64());
    }

    #[test]
    fn mix_separates_low_entropy_inputs() {
        let outs: Vec<u64> = (0..64).map(|i| mix2(0, i)).collect();
        let mut sorted = outs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), outs.len());
    }
}
