//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from a base
//! seed, a [`Purpose`] tag and a list of integer ids (object index, trial
//! index, ...). Streams never share state, so scenarios can run on any
//! number of threads and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never collide even with
/// identical ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Catalog,
    Demonstration,
    Sensor,
    Split,
    Init,
    Noise,
    Shuffle,
    Sampling,
    Trial,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Catalog => 0x01,
            Purpose::Demonstration => 0x02,
            Purpose::Sensor => 0x03,
            Purpose::Split => 0x04,
            Purpose::Init => 0x05,
            Purpose::Noise => 0x06,
            Purpose::Shuffle => 0x07,
            Purpose::Sampling => 0x08,
            Purpose::Trial => 0x09,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a purpose and ids into a new 64-bit seed.
pub fn derive_seed(base: u64, purpose: Purpose, ids: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ purpose.tag().rotate_left(56));
    for &id in ids {
        h = splitmix64(h ^ splitmix64(id.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

pub fn stream(base: u64, purpose: Purpose, ids: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, purpose, ids))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
