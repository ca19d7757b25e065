//! Dense kernels, truncated SVD and reproducible random streams.

mod matrix;
mod rng;
mod svd;

use rand::Rng;
use rand_distr::StandardNormal;

pub use matrix::{matmul, Matrix};
pub use rng::{domain, RngStream, StreamRng};
pub use svd::{truncated_svd, Svd};

use crate::error::{Error, Result};

/// I.i.d. `N(0, stddev²)` entries drawn from `stream`.
pub fn gaussian_matrix(rows: usize, cols: usize, stream: &RngStream, stddev: f64) -> Result<Matrix> {
    let mut rng = stream.rng();
    gaussian_matrix_with(rows, cols, &mut rng, stddev)
}

/// Same as [`gaussian_matrix`] but continues an existing generator.
pub fn gaussian_matrix_with<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
    stddev: f64,
) -> Result<Matrix> {
    if !(stddev >= 0.0) || !stddev.is_finite() {
        return Err(Error::Range(format!("stddev {stddev} must be finite and >= 0")));
    }
    if stddev == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * stddev
    }))
}
