//! Named random streams split from one master seed.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed, with the
//! ChaCha stream id set to the component's fixed counter value below. Streams
//! never overlap, so changing how much one component draws leaves the others
//! untouched. Per-item generators (one per sequence, per step, ...) further
//! mix an item index into the key with [`item_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Jitter = 4,
    Clips = 5,
    Eval = 6,
    Adapt = 7,
}

pub fn stream(master: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(which as u64);
    rng
}

/// SplitMix64 finalizer over `(master, item)`.
pub fn item_seed(master: u64, item: u64) -> u64 {
    let mut z = master
        .wrapping_add(item.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn item_stream(master: u64, which: Stream, item: u64) -> ChaCha8Rng {
    stream(item_seed(master, item), which)
}
