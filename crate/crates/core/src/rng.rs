//! Named random sub-streams derived from a single user seed.
//!
//! Every consumer of randomness (initialization, splitting, synthesis, and
//! the per-epoch shuffle) gets its own ChaCha stream, so changing how one
//! consumer draws numbers never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Split,
    Synth,
    /// Schedule shuffle for the given zero-based epoch.
    Shuffle(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Split => 2,
            Stream::Synth => 3,
            Stream::Shuffle(epoch) => (1 << 32) | epoch,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
