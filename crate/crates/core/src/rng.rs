//! Counter-keyed random streams.
//!
//! Every random draw in a run is addressed by a key derived from the run
//! seed plus a path of integers (epoch, batch, layer, purpose). Two draws
//! with the same key are identical no matter in which order they are made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into keys.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const COMPENSATION: u64 = 3;
    pub const MINING: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const DATA: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const DOMAIN: u64 = 8;
    pub const SPLIT: u64 = 9;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    seed: u64,
    stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn root(seed: u64) -> Self {
        RngKey { seed, stream: 0 }
    }

    /// Derive a child key; order of `child` calls matters, call timing does not.
    pub fn child(self, part: u64) -> Self {
        RngKey {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(part.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn path(self, parts: &[u64]) -> Self {
        parts.iter().fold(self, |k, &p| k.child(p))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Addresses the random draws of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepKey {
    pub run: RngKey,
    pub epoch: usize,
    pub batch: usize,
}

impl StepKey {
    pub fn new(run: RngKey, epoch: usize, batch: usize) -> Self {
        StepKey { run, epoch, batch }
    }

    fn base(&self) -> RngKey {
        self.run.path(&[tag::EPOCH, self.epoch as u64, self.batch as u64])
    }

    /// Perturbation draw of (1-based) layer `layer`.
    pub fn compensation(&self, layer: usize) -> RngKey {
        self.base().path(&[tag::COMPENSATION, layer as u64])
    }

    pub fn mining(&self) -> RngKey {
        self.base().child(tag::MINING)
    }

    pub fn sampler(&self) -> RngKey {
        self.base().child(tag::SAMPLER)
    }
}
