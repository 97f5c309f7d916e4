//! Seed handling.
//!
//! Every consumer of randomness derives its own ChaCha stream from the one
//! user-facing seed. The stream id combines a component tag with a
//! per-component index (entity set, relation, replicate), so adding a new
//! consumer never shifts the draws seen by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Component {
    Init = 1,
    Split = 2,
    Synth = 3,
    CrossValidation = 4,
    Protocol = 5,
}

/// Independent generator for `(component, index)` under `seed`.
pub fn stream(seed: u64, component: Component, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((component as u64) << 48) | (index & 0xffff_ffff_ffff));
    rng
}
