//! Single-image defocus deblurring engine.
//!
//! Builds a coarse-to-fine restoration network out of dynamic residual
//! blocks on top of a small f32 autograd, trains it with a two-stage
//! schedule, and ships a physical defocus simulator that generates both
//! pixel-aligned (light-field style) and misaligned (two-shot style)
//! training pairs.

pub mod config;
pub mod data;
pub mod drb;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{GradTape, Tensor};

use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used throughout; all randomness flows from u64 seeds.
pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent RNG stream for a named purpose and index, so
/// parallel and serial generation agree bit-exactly.
pub fn stream_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    for b in index.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    rng(seed ^ h)
}
