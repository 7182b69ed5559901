//! Named random substreams derived from one run seed.
//!
//! Each stage of a run draws from its own ChaCha stream, so changing how
//! much randomness one stage consumes never shifts another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Train,
    Eval,
    Prune,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Train => 3,
            Stream::Eval => 4,
            Stream::Prune => 5,
        }
    }
}

/// Generator for `stream` under `seed`.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
