//! Named random streams. Every consumer draws from ChaCha20 seeded with the
//! run seed and a stream id built from a purpose tag and an index, so no two
//! purposes share randomness and nothing depends on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const RECOGNIZER_INIT: u64 = 1;
pub const RECOGNIZER_SHUFFLE: u64 = 2;
pub const FINETUNE_SHUFFLE: u64 = 3;
pub const VC_INIT: u64 = 4;
pub const VC_SHUFFLE: u64 = 5;
pub const VC_DROPOUT: u64 = 6;
pub const PROBE: u64 = 7;
pub const EVAL: u64 = 8;

pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | (index & 0xFFFF_FFFF_FFFF));
    rng
}
