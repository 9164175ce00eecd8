//! Seed derivation for reproducible, scheduling-independent random streams.
//!
//! Every (master seed, replication, machine) triple maps to its own ChaCha8
//! stream through [`stream_seed`]. The mapping is a fixed chain of SplitMix64
//! finalizers, so other implementations can regenerate the same seeds:
//!
//! ```text
//! s = mix64(master)
//! s = mix64(s ^ replication)
//! s = mix64(s ^ (machine + 1))
//! ```
//!
//! Per-worker streams never share state, so the order in which workers or
//! replications are advanced has no effect on the numbers they draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used by every worker and oracle.
pub type Stream = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer (Steele, Lea and Flood) applied to `x + golden gamma`.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stream used by `machine` in `replication` under `master`.
pub fn stream_seed(master: u64, replication: u64, machine: u64) -> u64 {
    let s = mix64(master);
    let s = mix64(s ^ replication);
    mix64(s ^ machine.wrapping_add(1))
}

/// Opens the stream for one (master, replication, machine) triple.
pub fn worker_stream(master: u64, replication: u64, machine: u64) -> Stream {
    Stream::seed_from_u64(stream_seed(master, replication, machine))
}

/// Opens an auxiliary stream (oracle estimation, synthetic data) from a plain seed.
pub fn aux_stream(seed: u64) -> Stream {
    Stream::seed_from_u64(mix64(seed ^ 0x6f72_6163_6c65))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn mix64_reference_values() {
        // SplitMix64 seeded with 0 yields these first outputs.
        assert_eq!(mix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(mix64(GOLDEN_GAMMA), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn seeds_distinct_across_grid() {
        let mut seen = HashSet::new();
        for r in 0..50 {
            for i in 0..50 {
                assert!(seen.insert(stream_seed(7, r, i)));
            }
        }
    }

    #[test]
    fn streams_reproduce() {
        let mut a = worker_stream(1, 2, 3);
        let mut b = worker_stream(1, 2, 3);
        for _ in 0..4 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }
}
