//! Counter-addressed random streams.
//!
//! Every draw in a simulation is taken from the stream identified by
//! `(seed, path, step, channel)`, so two runs that share those coordinates
//! see identical randomness regardless of thread scheduling or of which
//! other channels were consumed. Paired (common-random-number) experiments
//! rely on this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Random channels used within one simulation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Channel {
    OptionAsk = 0,
    OptionBid = 1,
    ExoBid = 2,
    ExoAsk = 3,
    BidMarks = 4,
    AskMarks = 5,
    Schedule = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for one `(seed, path, step, channel)` cell.
pub fn stream(seed: u64, path: u64, step: u64, channel: Channel) -> StreamRng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ path);
    h = splitmix64(h ^ step.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    h = splitmix64(h ^ (channel as u64));
    ChaCha8Rng::seed_from_u64(h)
}
