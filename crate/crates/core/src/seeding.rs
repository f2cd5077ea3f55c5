//! Named, seeded random streams. Every consumer of randomness (shuffle,
//! dropout, derangement, init) derives its own generator from the master seed,
//! a stream name and up to two counters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(seed: u64, name: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ fnv1a(name));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(h)
}
