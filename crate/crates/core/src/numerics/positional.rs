use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_positional_encoding<T: Scalar>(
    length: usize,
    d_model: usize,
) -> Result<Tensor<T>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = vec![T::zero(); length * d_model];
    for p in 0..length {
        for i in 0..d_model / 2 {
            let angle = p as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data[p * d_model + 2 * i] = T::of(angle.sin());
            data[p * d_model + 2 * i + 1] = T::of(angle.cos());
        }
    }
    Tensor::matrix(length, d_model, data)
}
