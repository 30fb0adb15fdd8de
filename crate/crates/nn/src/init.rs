//! Weight initializers matching the usual PyTorch defaults.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// He-normal with `fan_out` scaling, used for ReLU convolutions.
pub fn kaiming_normal_fan_out<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_out: usize) -> Vec<f32> {
    let std = (2.0 / fan_out as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for dense layers and biases.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}
