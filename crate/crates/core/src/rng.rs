//! Deterministic random number generation.
//!
//! Every stochastic choice in the crate flows through a ChaCha20 generator
//! seeded either directly or through [`derive`], which mixes a base seed
//! with context tags (step index, sample id, ...). Deriving per-use seeds
//! keeps the training loop stateless with respect to RNG: a (seed, step)
//! pair fully determines the stream, so checkpoint resume replays the
//! exact same draws without serializing generator internals.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Prng = ChaCha20Rng;

/// Seed a generator directly.
pub fn seeded(seed: u64) -> Prng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Mix a base seed with context tags into a new seed (SplitMix64 chain).
///
/// Deterministic, order-sensitive, and well-dispersed: `derive(s, &[a, b])`
/// differs from `derive(s, &[b, a])`.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = splitmix(state.wrapping_add(t));
    }
    splitmix(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw.
pub fn normal(rng: &mut Prng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Vector of standard normal draws.
pub fn normal_vec(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Deterministic in-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Prng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic_and_order_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
    }

    #[test]
    fn seeded_streams_repeat() {
        let a = normal_vec(&mut seeded(42), 16);
        let b = normal_vec(&mut seeded(42), 16);
        assert_eq!(a, b);
        let c = normal_vec(&mut seeded(43), 16);
        assert_ne!(a, c);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<u32> = (0..50).collect();
        shuffle(&mut seeded(3), &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
