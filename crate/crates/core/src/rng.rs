//! Seed derivation and seeded tensor sampling.
//!
//! All randomness in the crate flows from explicit `u64` seeds through
//! ChaCha8 streams so that runs are reproducible bit-for-bit.

use candle_core::{DType, Device, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// SplitMix64 finalizer applied to `seed ^ stream` mixing.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

pub fn standard_normal_vec<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard normal tensor drawn from `rng`.
pub fn standard_normal<R: rand::Rng, S: Into<Shape>>(
    shape: S,
    rng: &mut R,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let shape: Shape = shape.into();
    let data = standard_normal_vec(shape.elem_count(), rng);
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
