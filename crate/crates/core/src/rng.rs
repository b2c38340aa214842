//! Seeded random streams. Every consumer draws from its own ChaCha stream so
//! that adding draws in one place never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    SourceTrain = 1,
    TargetTrain,
    SourceVal,
    SourceTest,
    TargetTest,
    Init,
    SourceBatches,
    TargetBatches,
    PerturbNoise,
    Probe,
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}
