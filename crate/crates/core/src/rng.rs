//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a master
//! seed and addressed by `(purpose, index)`. Adding an environment or a restart
//! never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. The discriminant forms the high word of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    EnvParams,
    TrainData,
    TestData,
    Mixing,
    Restart,
    Init,
    Instance,
    Cell,
    MonteCarlo,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::EnvParams => 1,
            Purpose::TrainData => 2,
            Purpose::TestData => 3,
            Purpose::Mixing => 4,
            Purpose::Restart => 5,
            Purpose::Init => 6,
            Purpose::Instance => 7,
            Purpose::Cell => 8,
            Purpose::MonteCarlo => 9,
        }
    }
}

/// Stream for `(purpose, index)` under `master`.
pub fn stream(master: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((purpose.code() << 48) ^ index);
    rng
}

/// Derive a child seed from a parent seed and a path of integers (splitmix64 chain).
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    let mut h = parent ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
