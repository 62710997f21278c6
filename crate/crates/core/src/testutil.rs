use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg;

pub fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Gaussian matrix shifted toward the identity so it is comfortably invertible.
pub fn random_invertible<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    gaussian(d, d, rng) * 0.5 + DMatrix::identity(d, d) * 2.0
}

pub fn random_orthogonal_frames<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
    (0..n).map(|_| linalg::project_orthogonal(&gaussian(d, d, rng))).collect()
}
