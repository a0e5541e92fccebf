use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream derived from a user seed.
///
/// Streams keep unrelated consumers (direction init, sampling, shuffling)
/// from perturbing each other when one of them draws more numbers.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const DIRECTIONS: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const REINIT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const ORDER: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const MCQ: u64 = 9;
}

/// Mixes an epoch or step counter into a seed so per-epoch streams do not
/// depend on how many numbers earlier epochs consumed.
pub(crate) fn mix(seed: u64, counter: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
