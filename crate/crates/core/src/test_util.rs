//! Shared helpers for unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::standard_normal(shape.to_vec(), &mut rng(seed))
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct coefficient to the checked scalar.
pub fn probe_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(random(&shape, 999));
    let y = tape.mul(x, w)?;
    tape.sum(y)
}
