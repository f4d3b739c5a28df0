//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is the
//! tuple `(seed, purpose, a, b, c)`. The meaning of `a`, `b`, `c` depends on the
//! purpose (typically iteration, layer index and parameter group). Because the
//! stream is a pure function of its key, evaluation order and thread count can
//! never change which numbers a given consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Stabilize = 2,
    Noise = 3,
    Dropout = 4,
    Shuffle = 5,
    Predict = 6,
    Monitor = 7,
    Synthetic = 8,
    Verify = 9,
}

/// Parameter group within a layer.
pub const GROUP_WEIGHTS: u64 = 0;
pub const GROUP_BIASES: u64 = 1;

pub fn keyed(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let words = [
        seed,
        (purpose as u64) ^ a.rotate_left(8),
        b,
        c ^ 0x9e37_79b9_7f4a_7c15,
    ];
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn standard_normals<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
