//! Seed derivation. Every stage draws from its own named stream so that
//! changing one stage never shifts the random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// Named random streams derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    Init,
    Sampling,
    Eval,
    Synthetic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Split => 0x5350_4c49_5400_0001,
            Stream::Init => 0x494e_4954_0000_0002,
            Stream::Sampling => 0x5341_4d50_4c45_0003,
            Stream::Eval => 0x4556_414c_0000_0004,
            Stream::Synthetic => 0x5359_4e54_4800_0005,
        }
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of `stream` under `root`.
pub fn stream_seed(root: u64, stream: Stream) -> u64 {
    mix(mix(root) ^ stream.tag())
}

/// Seed of sub-stream `index` (e.g. one user) below a stream seed.
pub fn substream_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn stream_rng(root: u64, stream: Stream) -> StageRng {
    StageRng::seed_from_u64(stream_seed(root, stream))
}

pub fn seeded(seed: u64) -> StageRng {
    StageRng::seed_from_u64(seed)
}
