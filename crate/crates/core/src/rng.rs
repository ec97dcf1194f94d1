//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (a counter-based generator). A run seed
//! is expanded into independent streams, one per purpose, so that e.g. the
//! variational noise can be replayed without touching data generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Init = 3,
    Noise = 4,
    Minibatch = 5,
    Eval = 6,
    Prune = 7,
    Selection = 8,
}

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Like [`stream`], with an extra index (e.g. a task or round number) mixed
/// into the seed.
pub fn substream(seed: u64, stream_id: Stream, index: u64) -> Rng {
    let mixed = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    stream(mixed, stream_id)
}

pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(rows, cols, data)
}

/// `k` distinct indices from `0..n`, in draw order.
pub fn sample_without_replacement(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k.min(n)).into_vec()
}
