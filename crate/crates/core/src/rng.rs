//! Named random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams used by one twin-experiment run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Truth = 1,
    Background = 2,
    ObservationNoise = 3,
    Perturbation = 4,
    HyperParameters = 5,
    Climatology = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-cycle seed for a stream, so that any single cycle can be regenerated
/// without replaying the ones before it.
pub fn cycle_seed(seed: u64, stream: Stream, cycle: usize) -> u64 {
    // splitmix64 finaliser over (seed, stream, cycle)
    let mut z = seed
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((cycle as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_differ_and_repeat() {
        let a: u64 = stream_rng(5, Stream::Truth).gen();
        let b: u64 = stream_rng(5, Stream::Background).gen();
        let c: u64 = stream_rng(5, Stream::Truth).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
        assert_ne!(
            cycle_seed(1, Stream::Perturbation, 3),
            cycle_seed(1, Stream::Perturbation, 4)
        );
    }
}
