use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn normal_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}
