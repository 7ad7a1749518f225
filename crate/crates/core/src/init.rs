//! Seeded weight initialisation. All randomness in the crate comes from
//! ChaCha8 streams seeded with a `u64`, so a seed pins every value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Shape, Tensor};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Zero-mean Gaussian with standard deviation `sqrt(gain / fan_in)`.
pub fn fan_in_normal<T: Element>(rng: &mut Rng, shape: Shape, fan_in: usize, gain: f64) -> Tensor<T> {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Standard normal values, used for test inputs.
pub fn normal<T: Element>(rng: &mut Rng, shape: impl Into<Shape>) -> Tensor<T> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape.into(), |_| T::of(dist.sample(rng)))
}
