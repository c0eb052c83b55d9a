//! Deterministic random-number streams.
//!
//! Every stochastic choice in the pipeline (parameter init, shuffling,
//! dropout masks, synthetic data) draws from its own ChaCha stream derived
//! from the run seed plus a list of domain tags. Streams are independent of
//! each other and of call order, which is what makes runs reproducible and
//! lets two configurations share identical draws for their common parts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Domain tags. Each distinct stochastic purpose gets its own constant so
/// that adding a new consumer never shifts the draws of an existing one.
pub mod domain {
    pub const PARAM_INIT: u64 = 1;
    pub const EMBED_INIT: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SYNTH_GAZE: u64 = 6;
    pub const SYNTH_CORPUS: u64 = 7;
    pub const FOLD: u64 = 8;
}

/// splitmix64; used only to mix tags into seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tag` into `seed`, producing a new seed. Not commutative.
pub fn combine_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x51a2_c507_23cd_9e71)))
}

/// An RNG for the stream identified by `tags` under `seed`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = combine_seed(s, t);
    }
    ChaCha12Rng::seed_from_u64(s)
}
