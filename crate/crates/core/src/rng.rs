//! Named random sub-streams derived from a single root seed.
//!
//! Each stream is a ChaCha8 generator keyed by `(root, stream, index)`, so
//! drawing from one stream never shifts another. Paired-seed comparisons
//! rely on this: two agents evaluated with the same root see the same
//! scenes and the same environment noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    /// Scene / goal sampling.
    Env,
    /// Environment noise (thruster noise).
    Noise,
    /// Manager route sampling.
    Manager,
    /// Parameter initialisation.
    Init,
    /// Minibatch sampling from replay buffers.
    Batch,
    /// Held-out validation scenes.
    Validation,
    /// Held-out evaluation scenes.
    Evaluation,
    /// Tabular Q pre-training.
    QLearning,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Env => 1,
            Stream::Noise => 2,
            Stream::Manager => 3,
            Stream::Init => 4,
            Stream::Batch => 5,
            Stream::Validation => 6,
            Stream::Evaluation => 7,
            Stream::QLearning => 8,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTree {
    pub root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn seed(&self, stream: Stream, index: u64) -> u64 {
        splitmix64(splitmix64(self.root ^ stream.tag().wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
    }

    pub fn rng(&self, stream: Stream, index: u64) -> Rng {
        Rng::seed_from_u64(self.seed(stream, index))
    }

    /// A child tree, e.g. one per sweep cell or per training seed.
    pub fn child(&self, index: u64) -> SeedTree {
        SeedTree::new(splitmix64(
            self.root.wrapping_add(0x5851_F42D_4C95_7F2D) ^ splitmix64(index),
        ))
    }
}
