//! Seeded random streams.
//!
//! Every consumer draws from a ChaCha8 generator keyed by the run seed and a
//! purpose-specific stream id, so noise generation and predictor bootstrap
//! never share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags mapped onto ChaCha stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Noise = 1,
    Coefficients = 2,
    Bootstrap = 3,
    Auxiliary = 4,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
