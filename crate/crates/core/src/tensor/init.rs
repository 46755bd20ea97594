//! Weight initialization. All draws happen in f64 and are cast afterwards so
//! f32 and f64 instantiations of a model consume identical rng streams.

use super::{fr, Scalar};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// He/Kaiming standard deviation for a fan-in and activation gain.
pub fn he_std(fan_in: usize, gain: f64) -> f64 {
    gain * (2.0 / fan_in as f64).sqrt()
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

pub fn normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || fr(box_muller(rng) * std))
}

/// Normal draw with |z| > 2 resampled, then scaled by `std`.
pub fn trunc_normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let mut z = box_muller(rng);
        while z.abs() > 2.0 {
            z = box_muller(rng);
        }
        fr(z * std)
    })
}
