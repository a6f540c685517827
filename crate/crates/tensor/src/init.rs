use rand::Rng;

use crate::tensor::Tensor;

/// Uniform in `±sqrt(1/fan_in)`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}
