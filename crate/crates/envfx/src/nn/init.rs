//! Seeded parameter initialization.

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::tensor::Tensor;

/// Xavier-uniform matrix `[fan_in, fan_out]`.
pub fn xavier(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::param(
        Array2::from_shape_vec((fan_in, fan_out), data)
            .unwrap()
            .into_dyn(),
    )
}

/// Zero vector of length `n`.
pub fn zeros(n: usize) -> Tensor {
    Tensor::param(Array1::<f64>::zeros(n).into_dyn())
}

/// Ones vector of length `n` (layer/batch norm gains).
pub fn ones(n: usize) -> Tensor {
    Tensor::param(Array1::<f64>::ones(n).into_dyn())
}

/// Small-uniform embedding table `[n, d]`.
pub fn embedding_table(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Tensor {
    let a = 0.05;
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-a..a)).collect();
    Tensor::param(Array2::from_shape_vec((n, d), data).unwrap().into_dyn())
}

/// Uniform tensor of arbitrary shape with the Xavier bound computed from
/// the given fan sizes (used for convolution kernels stored flat).
pub fn xavier_shaped(
    rng: &mut ChaCha20Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-a..a)).collect();
    Tensor::param(ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap())
}
