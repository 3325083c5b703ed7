//! Seed derivation for independent random streams.
//!
//! Every stream is keyed by `(master_seed, tag, ids...)`, so the draws a
//! client sees in a round do not depend on scheduling order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// Stream tags.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const SAMPLER: u64 = 0x02;
    pub const CLIENT: u64 = 0x03;
    pub const REPLICATE: u64 = 0x04;
    pub const INSTANCE: u64 = 0x05;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of identifiers into a child seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, parts: &[u64]) -> RngStream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

/// Stream for one client's local training in one round.
pub fn client_stream(master: u64, client: usize, round: usize) -> RngStream {
    stream(master, &[tag::CLIENT, client as u64, round as u64])
}
