//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Split,
    BackboneInit,
    UncertaintyInit,
    Stage1Batches,
    Stage2Batches,
    Stage3Batches,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Split => 2,
            Stream::BackboneInit => 3,
            Stream::UncertaintyInit => 4,
            Stream::Stage1Batches => 5,
            Stream::Stage2Batches => 6,
            Stream::Stage3Batches => 7,
        }
    }
}

/// Generator for `stream` of the run seeded with `seed`. Streams are
/// independent, so any stage can be re-run on its own.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
