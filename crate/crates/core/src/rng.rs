use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible random streams derived from one seed.
///
/// Each consumer draws from its own stream so that adding work in one place
/// (say, flow training) never shifts the numbers another place sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ClassifierInit = 1,
    ClassifierBatches = 2,
    FlowInit = 3,
    FlowBatches = 4,
    Augment = 5,
    Data = 6,
    Texture = 7,
    Check = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
