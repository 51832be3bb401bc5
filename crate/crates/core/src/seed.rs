//! Deterministic seed derivation.
//!
//! Every stochastic phase (proposal draws, dropout masks, atoms, simulator
//! noise, metric subsampling) takes its own stream derived from a master seed
//! and a path of labels, so phases never share RNG state and a run can be
//! resumed at any phase boundary without checkpointing generator internals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Phase labels used when deriving sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Proposal = 1,
    Acquisition = 2,
    Simulation = 3,
    Training = 4,
    Init = 5,
    Metrics = 6,
    Observation = 7,
    Reference = 8,
    Baseline = 9,
}

/// Derive a child seed from `seed` and a label.
pub fn derive(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derive a seed for `stream` at position `index` (e.g. a round number).
pub fn stream_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    derive(derive(seed, stream as u64), index)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    rng_from(stream_seed(seed, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_deterministic_and_label_sensitive() {
        assert_eq!(derive(7, 3), derive(7, 3));
        assert_ne!(derive(7, 3), derive(7, 4));
        assert_ne!(derive(7, 3), derive(8, 3));
        assert_ne!(
            stream_seed(1, Stream::Proposal, 0),
            stream_seed(1, Stream::Training, 0)
        );
    }
}
