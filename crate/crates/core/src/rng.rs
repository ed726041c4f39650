//! Deterministic random streams keyed by purpose, batch and ensemble copy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent purposes that each get their own stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Stream {
    Transform = 1,
    Selection = 2,
    Mixup = 3,
    Shuffle = 4,
    Variance = 5,
    Admix = 6,
    Clean = 7,
    Init = 8,
    Data = 9,
    Train = 10,
    Labels = 11,
}

/// Stream for `(seed, batch, copy, purpose)`. Streams never overlap, so a
/// consumer on one purpose cannot shift draws seen by another.
pub fn stream(seed: u64, batch: u64, copy: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((purpose as u64) << 56) ^ ((batch & 0xFF_FFFF_FFFF) << 16) ^ (copy & 0xFFFF);
    rng.set_stream(id);
    rng
}
