use rand::Rng;

use super::{Scalar, Tensor};

/// Glorot-uniform values in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
