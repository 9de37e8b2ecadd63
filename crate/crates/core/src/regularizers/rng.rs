//! Seeded, splittable random streams for regularizer draws.
//!
//! Every regularizer unit gets its own generators derived from
//! `(seed, replica, step, block, branch)`, so the draws of one unit never
//! depend on how many numbers another unit consumed, and replicas never
//! share a stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One regularizer unit's position in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u32,
    pub step: u64,
    pub block: u32,
    pub branch: u32,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into one well-mixed 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5ee_d5ee_d5ee_d5eeu64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const GATE: u64 = 1;
const ALPHA: u64 = 2;
const BETA: u64 = 3;

/// The three independent streams a regularizer unit draws from: the
/// Bernoulli gate `b`, the forward coefficient and the backward coefficient.
#[derive(Clone, Debug)]
pub struct UnitRng {
    pub gate: ChaCha8Rng,
    pub alpha: ChaCha8Rng,
    pub beta: ChaCha8Rng,
}

impl UnitRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            gate: ChaCha8Rng::seed_from_u64(derive_seed(&[seed, GATE])),
            alpha: ChaCha8Rng::seed_from_u64(derive_seed(&[seed, ALPHA])),
            beta: ChaCha8Rng::seed_from_u64(derive_seed(&[seed, BETA])),
        }
    }

    pub fn for_key(key: StreamKey) -> Self {
        Self::from_seed(derive_seed(&[
            key.seed,
            key.replica as u64,
            key.step,
            key.block as u64,
            key.branch as u64,
        ]))
    }

    /// Splits off a fresh generator from the backward stream; the scaling
    /// node keeps it until its backward pass runs.
    pub fn spawn_backward(&mut self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.beta.next_u64())
    }
}
